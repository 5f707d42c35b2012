"""Command-line entry point: ``efft <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime or numeric failure.
Every random draw derives from one experiment seed (``--seed``, falling back
to ``train.seed`` in the config).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import checkpoint as ckpt
from .analysis import adjusted_similarity, similarity_grid, subspace_similarity
from .config import ExperimentConfig, load_config, parse_blocks, parse_layers
from .data import Dataset, SyntheticSpec, gen_synthetic, load_idx, split, write_idx_dir
from .errors import EfftError
from .factors import Role, delta_for, init_factors, init_lora_model, param_count_for
from .tensor import Rng
from .train import (BLOCK_CHOICES, ablation_run, ablation_to_csv, accuracy, reports_to_csv, sweep,
                    train)
from .vit import build_vit

log = logging.getLogger("efft")

# Tags for Rng.spawn, one per consumer of the experiment seed.
_BACKBONE, _FACTORS = 101, 102


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- shared plumbing ----------------------------------------------------------------

def _seed(args, cfg: ExperimentConfig) -> int:
    return cfg.train.seed if args.seed is None else args.seed


def _dataset(cfg: ExperimentConfig, args) -> Dataset:
    d = cfg.data
    if d.source == "idx":
        ds = load_idx(d.images, d.labels, d.max_samples, d.n_classes)
        if ds.images.shape[1] != d.image_size or ds.images.shape[2] != d.image_size:
            raise EfftError(f"IDX images are {ds.images.shape[1]}x{ds.images.shape[2]}, "
                            f"config says data.image_size={d.image_size}")
        return ds
    ds = gen_synthetic(cfg.synthetic_spec(args.seed))
    if d.max_samples is not None:
        ds = ds.subset(list(range(min(d.max_samples, len(ds)))))
    return ds


def _backbone(cfg: ExperimentConfig, seed: int):
    return build_vit(cfg.vit_config(), Rng(seed).spawn(_BACKBONE))


def _factors(cfg: ExperimentConfig, seed: int, r1=None, s=None):
    m, me = cfg.model, cfg.method
    if me.kind == "linear":
        return None
    r1 = me.r1 if r1 is None else r1
    r2 = cfg.r2 if r1 == me.r1 else r1
    s = me.s if s is None else s
    rng = Rng(seed).spawn(_FACTORS)
    if me.kind == "lora":
        roles = tuple(Role(x.strip()) for x in me.lora_roles.split(","))
        return init_lora_model(m.d, m.L, r1, s, roles=roles, sigma_std=me.sigma_std, rng=rng)
    return init_factors(me.kind, m.d, m.L, r1, r2, s, rng=rng, sigma_std=me.sigma_std, s2=me.s2)


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse number list {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse integer list {text!r}") from None


# -- subcommands --------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    ds = _dataset(cfg, args)
    val = None
    if cfg.train.val_fraction > 0:
        ds, val = split(ds, cfg.train.val_fraction, Rng(seed).spawn(2))
    model = _backbone(cfg, seed)
    factors = _factors(cfg, seed)
    mask = cfg.tuning_mask()
    res = train(model, factors, mask, ds, cfg.hyper(seed), val=val)
    rep = res.report
    ckpt.save_checkpoint(args.output, res.model, res.factors, rep, mask, seed)
    _write(args.output + ".report.csv", reports_to_csv([rep]))
    print(f"method={rep.method} params={rep.params} steps={rep.steps} "
          f"train_acc={rep.train_acc:.4f} val_acc={rep.val_acc:.4f}")
    if rep.diverged:
        print(f"error: training diverged: {rep.abort_reason}", file=sys.stderr)
        return 2
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    state = ckpt.load_checkpoint(args.ckpt)
    if state.model.cfg != cfg.vit_config():
        raise EfftError("checkpoint model config does not match the config file")
    ds = _dataset(cfg, args)
    acc = accuracy(state.model, ds, factors=state.factors, mask=state.mask)
    print(f"n={len(ds)} accuracy={acc:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if cfg.method.kind == "linear":
        raise EfftError("sweep needs a factorized method, not 'linear'")
    seed = _seed(args, cfg)
    scales = _floats(args.scales) if args.scales else [cfg.method.s]
    ranks = _ints(args.ranks) if args.ranks else [cfg.method.r1]
    result = sweep(_backbone(cfg, seed), _dataset(cfg, args), cfg.method.kind, scales, ranks,
                   cfg.hyper(seed), val_fraction=cfg.train.val_fraction or 0.2,
                   mask=cfg.tuning_mask(), rank_preset=args.rank_preset,
                   sigma_std=cfg.method.sigma_std)
    extra = [{"best": int(rep is result.best)} for rep in result.grid]
    _write(args.output, reports_to_csv(result.grid, extra))
    if result.best is None:
        print("error: every sweep cell diverged", file=sys.stderr)
        return 2
    b = result.best
    print(f"best r1={b.r1} r2={b.r2} s={b.s:g} val_acc={b.val_acc:.4f} params={b.params}")
    return 0


def _layer_groups(text: str, L: int) -> dict:
    groups = {}
    for part in text.split(";"):
        part = part.strip()
        if part:
            groups[part] = tuple(parse_layers(part, L))
    return groups


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    L = cfg.model.L
    layer_sets = _layer_groups(args.layers, L) if args.layers else {}
    blocks = [b.strip() for b in args.blocks.split(",") if b.strip()]
    bad = [b for b in blocks if b not in BLOCK_CHOICES]
    if bad:
        raise UsageError(f"--blocks: unknown choice(s) {bad}; expected {sorted(BLOCK_CHOICES)}")
    rows = ablation_run(_backbone(cfg, seed), _dataset(cfg, args), cfg.method.kind, layer_sets,
                        blocks, r=cfg.method.r1, s=cfg.method.s, hyper=cfg.hyper(seed),
                        val_fraction=cfg.train.val_fraction or 0.2, sigma_std=cfg.method.sigma_std)
    _write(args.output, ablation_to_csv(rows))
    for r in rows:
        print(f"{r.layers:>8} {r.blocks:>5} val_acc={r.report.val_acc:.4f} delta={r.delta_pct:+.2f}")
    return 0


def _matrix(state, spec: str):
    if state.factors is None:
        raise EfftError("checkpoint has no factor tensors (linear probe)")
    role, _, layer = spec.partition(".")
    try:
        return delta_for(state.factors, Role(role), int(layer or 0))
    except ValueError:
        raise UsageError(f"--matrix {spec!r}: expected <role>[.<layer>], role in "
                         f"{[r.value for r in Role]}") from None


def cmd_similarity(args) -> int:
    if len(args.ckpt) != 2:
        raise UsageError("similarity needs exactly two --ckpt arguments")
    a = _matrix(ckpt.load_checkpoint(args.ckpt[0]), args.matrix)
    b = _matrix(ckpt.load_checkpoint(args.ckpt[1]), args.matrix_b or args.matrix)
    if a.shape[0] != b.shape[0]:
        raise EfftError(f"matrices have different row counts {a.shape} vs {b.shape}")
    seed = 0 if args.seed is None else args.seed
    if args.grid:
        g = similarity_grid(a, b, args.i, args.j, adjust=args.adjust, rng=Rng(seed))
        lines = ["i,j,similarity"] + [f"{r['i']},{r['j']},{r['similarity']}" for r in g.to_csv_rows()]
        _write(args.grid, "\n".join(lines) + "\n")
    if args.adjust:
        value = adjusted_similarity(a, b, args.i, args.j, rng=Rng(seed))
    else:
        value = subspace_similarity(a, b, args.i, args.j)
    print(f"{value:.4f}")
    return 0


def cmd_count_params(args) -> int:
    cfg = load_config(args.config)
    m, me = cfg.model, cfg.method
    if me.kind == "linear":
        n = 0
    else:
        n = param_count_for(me.kind, m.d, m.L, me.r1, cfg.r2, len(me.lora_roles.split(",")))
    if args.include_head:
        n += m.d * m.classes + m.classes
    print(n)
    return 0


def _gen_spec(text: str, seed) -> SyntheticSpec:
    if os.path.isfile(text):
        spec = load_config(text).synthetic_spec()
    else:
        fields = {}
        aliases = {"classes": "n_classes", "samples": "samples_per_class", "size": "image_size",
                   "noise": "noise_std"}
        for part in text.split(","):
            if not part.strip():
                continue
            key, sep, val = part.partition("=")
            key = aliases.get(key.strip(), key.strip())
            if not sep or key not in ("n_classes", "samples_per_class", "image_size", "noise_std", "seed"):
                raise UsageError(f"--spec: cannot parse {part!r}")
            try:
                fields[key] = float(val) if key == "noise_std" else int(val)
            except ValueError:
                raise UsageError(f"--spec: bad value in {part!r}") from None
        spec = SyntheticSpec(**fields)
    if seed is not None:
        spec = SyntheticSpec(spec.n_classes, spec.samples_per_class, spec.image_size,
                             spec.noise_std, seed)
    return spec


def cmd_gen_data(args) -> int:
    spec = _gen_spec(args.spec, args.seed)
    os.makedirs(args.output, exist_ok=True)
    img, lab = write_idx_dir(gen_synthetic(spec), args.output)
    print(f"wrote {spec.n_classes * spec.samples_per_class} items to {img} and {lab}")
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="efft", description="Factorized fine-tuning experiments on a toy ViT.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, fn, help_text, config=True):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        if config:
            sp.add_argument("-c", "--config", required=True, help="experiment config file")
        sp.add_argument("--seed", type=int, default=None, help="experiment seed (overrides config)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("train", cmd_train, "fine-tune and write a checkpoint plus <out>.report.csv")
    sp.add_argument("-o", "--output", required=True, help="checkpoint path")

    sp = add("eval", cmd_eval, "accuracy of a checkpoint on the configured dataset")
    sp.add_argument("--ckpt", required=True)

    sp = add("sweep", cmd_sweep, "grid over scales and ranks, selected by validation accuracy")
    sp.add_argument("--scales", help="comma-separated scales, e.g. 0.1,1,10,100")
    sp.add_argument("--ranks", help="comma-separated ranks, e.g. 8,16,32")
    sp.add_argument("--rank-preset", default="equal", choices=["equal", "r2_4x"])
    sp.add_argument("-o", "--output", required=True, help="grid CSV path")

    sp = add("ablate", cmd_ablate, "layer/block ablation against the all-layers baseline")
    sp.add_argument("--layers", default="", help="';'-separated layer groups, e.g. '0-2;3;4,5'")
    sp.add_argument("--blocks", default="mhsa,ffn,both", help="comma-separated from mhsa,ffn,both")
    sp.add_argument("-o", "--output", required=True, help="table CSV path")

    sp = add("similarity", cmd_similarity, "subspace similarity between two checkpoints' deltas",
             config=False)
    sp.add_argument("--ckpt", action="append", default=[], required=True,
                    help="checkpoint (give twice)")
    sp.add_argument("-i", type=int, required=True, help="left subspace dimension")
    sp.add_argument("-j", type=int, required=True, help="right subspace dimension")
    sp.add_argument("--matrix", default="q.0", help="delta to compare: <role>[.<layer>] (default q.0)")
    sp.add_argument("--matrix-b", default=None, help="delta for the second checkpoint if different")
    sp.add_argument("--adjust", action="store_true", help="subtract the Gaussian baseline")
    sp.add_argument("--grid", default=None, help="also write the full i x j grid as CSV")

    sp = add("count-params", cmd_count_params, "exact trainable factor parameter count")
    sp.add_argument("--include-head", action="store_true", help="add the classifier head")

    sp = add("gen-data", cmd_gen_data, "write a synthetic grating dataset as IDX files", config=False)
    sp.add_argument("--spec", default="", help="config file, or e.g. 'n_classes=4,samples_per_class=50'")
    sp.add_argument("-o", "--output", required=True, help="output directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_help(sys.stderr)
            return 1
        for name in ("i", "j"):
            if getattr(args, name, 1) < 1:
                raise UsageError(f"-{name} must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (EfftError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
