"""Command-line front end: ``vitprune <verb> [options]``.

Every verb reads a YAML run configuration (``--config``), applies dotted
``--set key=value`` overrides and verb flags (flags win), does its work,
and writes a manifest next to its primary output. Failures print one JSON
line to stderr and exit with 2 (config), 3 (validation) or 4 (numeric).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .arch import ArchSpec
from .config import RunConfig, apply_overrides, config_from_dict, load_config
from .errors import ConfigError, NumericError, ValidationError, VitpruneError

VERBS = ("init", "train", "score", "prune", "prune-blocks", "distill", "eval", "stats", "ablate")

# flag name -> config path; flags take precedence over the file and --set
FLAG_KEYS = {
    "seed": "seed",
    "threads": "threads",
    "ratio": "prune.ratio",
    "embed_dim": "prune.embed_dim",
    "attn_dim": "prune.attn_dim",
    "heads": "prune.heads",
    "ffn_dim": "prune.ffn_dim",
    "head_strategy": "prune.strategy",
    "target_depth": "blocks.target_depth",
    "block_mode": "blocks.mode",
    "proxy_size": "score.proxy_size",
    "strategy": "train.strategy",
    "alpha": "train.alpha",
    "beta": "train.beta",
    "epochs": "train.epochs",
    "lr": "train.lr",
    "study": "ablate.study",
}


# -- helpers ---------------------------------------------------------------

def tsv(rows: list[dict], out=None) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return "" if v is None else str(v)

    text = "\t".join(cols) + "\n" + "".join("\t".join(fmt(r.get(c)) for c in cols) + "\n" for r in rows)
    if out is not None:
        out.write(text)
    return text


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = apply_overrides(cfg, args.set or [])
    flags = []
    for attr, key in FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            flags.append(f"{key}={json.dumps(v)}")
    cfg = apply_overrides(cfg, flags)
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if cfg.dtype not in ("float64", "float32"):
        raise ConfigError(f"dtype must be float64 or float32, got {cfg.dtype!r}")
    return cfg


def spec_from_config(cfg: RunConfig) -> ArchSpec:
    m = cfg.model
    try:
        if m.variant == "vanilla":
            return ArchSpec.vit(m.image_size, m.patch_size, m.embed_dim, m.depth, m.num_heads, m.mlp_ratio,
                                m.num_classes, m.in_channels)
        if m.variant == "staged":
            return ArchSpec.pvt(m.image_size, tuple(m.embed_dims), tuple(m.depths), tuple(m.stage_heads),
                                tuple(m.mlp_ratios), tuple(m.sr_ratios), tuple(m.patch_kernels),
                                tuple(m.patch_strides), m.num_classes, m.in_channels)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"model section: {e}") from None
    raise ConfigError(f"model.variant must be 'vanilla' or 'staged', got {m.variant!r}")


def _dtype(cfg: RunConfig):
    return np.float64 if cfg.dtype == "float64" else np.float32


def load_data(cfg: RunConfig, labeler_spec: ArchSpec | None = None):
    """(train, eval) datasets as described by the data section."""
    from .data import Dataset, load_cifar10_bin, synth_images
    from .experiments import Hermetic, make_labeler
    from .model import predict_logits
    from .persist import load_checkpoint

    d = cfg.data
    if d.source == "cifar10":
        if not d.train_paths or not d.eval_paths:
            raise ConfigError("data.train_paths and data.eval_paths are required for cifar10")
        train, ev = load_cifar10_bin(d.train_paths, "train"), load_cifar10_bin(d.eval_paths, "eval")
        if d.classes:
            train, ev = train.subset_classes(d.classes), ev.subset_classes(d.classes)
        return train, ev
    if d.source != "synth":
        raise ConfigError(f"data.source must be 'synth' or 'cifar10', got {d.source!r}")
    m = cfg.model
    if d.labels == "random":
        from .data import synth_dataset

        tr = synth_dataset(d.n_train, m.image_size, m.in_channels, m.num_classes, seed=d.seed)
        ev = synth_dataset(d.n_eval, m.image_size, m.in_channels, m.num_classes, seed=d.seed + 1, split="eval")
        return tr, ev
    if d.labels == "teacher":
        if not d.labeler:
            raise ConfigError("data.labels=teacher needs data.labeler (a checkpoint path)")
        labeler = load_checkpoint(d.labeler)
    elif d.labels == "labeler":
        patch = m.patch_size if m.variant == "vanilla" else max(1, m.image_size // 4)
        labeler = make_labeler(Hermetic(image_size=m.image_size, patch_size=patch, in_channels=m.in_channels,
                                        num_classes=m.num_classes), d.seed)
    else:
        raise ConfigError(f"data.labels must be labeler, teacher or random, got {d.labels!r}")

    def split(n, s, tag):
        x = synth_images(n, m.image_size, m.in_channels, seed=s)
        y = predict_logits(labeler, x).argmax(axis=1).astype(np.int64)
        return Dataset(x, y, m.num_classes, (0.0,) * m.in_channels, (1.0,) * m.in_channels, tag, "synth-labeler")

    return split(d.n_train, 30_000 + d.seed, "train"), split(d.n_eval, 40_000 + d.seed, "eval")


def train_config(cfg: RunConfig):
    from .distill import DistillConfig

    t = cfg.train
    try:
        return DistillConfig(t.strategy, t.alpha, t.beta, t.epochs, t.lr, t.weight_decay, t.batch_size,
                             t.seed, t.warmup_frac, t.augment)
    except ValueError as e:
        raise ConfigError(f"train section: {e}") from None


class Run:
    """Bookkeeping for one command: inputs, outputs and the manifest."""

    def __init__(self, args, cfg: RunConfig):
        self.args, self.cfg = args, cfg
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.extra: dict = {}

    def load_model(self, path):
        from .persist import file_digest, load_checkpoint

        if not path:
            raise ConfigError("a model checkpoint path is required (--model)")
        if not Path(path).exists():
            raise ConfigError(f"no such file: {path}")
        self.inputs[str(path)] = file_digest(path)
        return load_checkpoint(path)

    def note_input(self, path):
        from .persist import file_digest

        if not Path(path).exists():
            raise ConfigError(f"no such file: {path}")
        self.inputs[str(path)] = file_digest(path)

    def wrote(self, path):
        from .persist import file_digest

        self.outputs[str(path)] = file_digest(path)

    def write_text(self, path, text: str):
        from .persist import locked_write

        with locked_write(path, "w") as f:
            f.write(text)
        self.wrote(path)

    def save_model(self, model, path, meta=None):
        from .persist import save_checkpoint

        save_checkpoint(model, path, meta)
        self.wrote(path)

    def manifest(self, primary) -> Path:
        path = Path(self.args.manifest) if self.args.manifest else Path(str(primary) + ".manifest.json")
        doc = {
            "format": "VITPRUNE-MANIFEST",
            "version": 1,
            "tool_version": __version__,
            "verb": self.args.verb,
            "argv": self.args.argv,
            "cwd": os.getcwd(),
            "config": self.cfg.to_dict(),
            "seeds": {"run": self.cfg.seed, "model": self.cfg.model.seed, "data": self.cfg.data.seed,
                      "proxy": self.cfg.score.proxy_seed, "train": self.cfg.train.seed},
            "threads": self.cfg.threads,
            "inputs": self.inputs,
            "outputs": self.outputs,
            **self.extra,
        }
        self.write_text_raw(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return path

    def write_text_raw(self, path, text):
        from .persist import locked_write

        with locked_write(path, "w") as f:
            f.write(text)


def _require_out(args):
    if not args.output:
        raise ConfigError(f"{args.verb} needs --output")
    return Path(args.output)


def _log_writer(path):
    from .distill import log_line

    fh = open(path, "w") if path else None

    def log(rec):
        line = log_line(rec)
        if fh is not None:
            fh.write(line + "\n")
            fh.flush()
        print(line, file=sys.stderr)

    return log, fh


# -- verbs -----------------------------------------------------------------

def cmd_init(run: Run):
    from .model import init_model

    cfg = run.cfg
    model = init_model(spec_from_config(cfg), seed=cfg.model.seed, std=cfg.model.init_std, dtype=_dtype(cfg))
    out = _require_out(run.args)
    run.save_model(model, out, {"verb": "init", "seed": cfg.model.seed})
    print(f"wrote {out} ({model.num_params} parameters, fingerprint {model.fingerprint()[:16]})")
    return out


def _finetune(run: Run, student, teacher, train, ev):
    from .distill import TrainingDiverged, finetune

    args = run.args
    log_path = args.log or (str(args.output) + ".log.jsonl")
    log, fh = _log_writer(log_path)
    try:
        model, records = finetune(student, teacher, train, train_config(run.cfg), eval_data=ev, log=log)
    except TrainingDiverged as e:
        dump = str(args.output) + ".diverged.ckpt"
        run.save_model(e.model, dump, {"diverged_epoch": e.epoch})
        raise NumericError(f"{e} (state saved to {dump})") from None
    finally:
        if fh is not None:
            fh.close()
    run.wrote(log_path)
    return model, records


def cmd_train(run: Run):
    from .model import init_model

    cfg = run.cfg
    if cfg.train.strategy != "none":
        run.cfg = cfg = apply_overrides(cfg, ["train.strategy=none"])
    model = run.load_model(run.args.model) if run.args.model else init_model(
        spec_from_config(cfg), seed=cfg.model.seed, std=cfg.model.init_std, dtype=_dtype(cfg))
    train, ev = load_data(cfg)
    out = _require_out(run.args)
    model, _ = _finetune(run, model, None, train, ev)
    run.save_model(model, out, {"verb": "train"})
    return out


def cmd_score(run: Run):
    from .importance import build_proxy, score_model
    from .persist import table_text

    cfg = run.cfg
    model = run.load_model(run.args.model)
    train, _ = load_data(cfg)
    proxy = build_proxy(train, cfg.score.proxy_size, seed=cfg.score.proxy_seed, source=train.name)
    t0 = time.perf_counter()
    table = score_model(model, proxy, channels=not run.args.blocks_only, blocks=not run.args.no_blocks,
                        workers=cfg.score.workers)
    out = _require_out(run.args)
    run.write_text(out, table_text(table))
    print(f"wrote {out}: {len(table.channel_scores)} channel and {len(table.block_scores)} block scores "
          f"in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return out


def _cost_rows(spec) -> list[dict]:
    from .cost import cost_report

    rep = cost_report(spec)
    rows = [{"module": n, "params": p, "macs": m} for n, p, m in rep.rows()]
    rows.append({"module": "total", "params": rep.params, "macs": rep.macs})
    return rows


def cmd_prune(run: Run):
    from .persist import load_recipe, load_table
    from .surgeon import ChannelTargets, apply_recipe, prune_channels

    cfg, args = run.cfg, run.args
    model = run.load_model(args.model)
    out = _require_out(args)
    if args.replay:
        run.note_input(args.replay)
        recipe = load_recipe(args.replay, model)
        pruned = apply_recipe(model, recipe)
    else:
        if not args.table:
            raise ConfigError("prune needs --table (or --replay RECIPE)")
        run.note_input(args.table)
        table = load_table(args.table, model, allow_stale=args.allow_stale)
        p = cfg.prune
        explicit = any(v is not None for v in (p.embed_dim, p.attn_dim, p.heads, p.ffn_dim, p.sr_dim))
        if explicit and p.ratio is not None:
            raise ConfigError("give either prune.ratio or explicit target dims, not both")
        targets = None
        ratio = p.ratio
        if explicit:
            attn = p.attn_dim if p.attn_dim is not None else (p.embed_dim if isinstance(p.embed_dim, int) else None)
            targets = ChannelTargets(p.embed_dim, attn, p.heads, p.ffn_dim, p.sr_dim)
        elif ratio is None:
            ratio = 0.0
        if ratio is not None and not 0.0 <= ratio < 1.0:
            raise ConfigError(f"prune.ratio must be in [0, 1), got {ratio}")
        pruned, recipe = prune_channels(model, table, ratio=ratio, targets=targets, strategy=p.strategy,
                                        components=tuple(p.components))
    run.save_model(pruned, out, {"verb": "prune"})
    recipe_path = args.recipe or str(out) + ".recipe"
    run.write_text(recipe_path, recipe.to_text())
    tsv(_cost_rows(pruned.spec), sys.stdout)
    return out


def cmd_prune_blocks(run: Run):
    from .importance import build_proxy
    from .surgeon import one_shot_block_prune, progressive_block_prune

    cfg, args = run.cfg, run.args
    model = run.load_model(args.model)
    target = cfg.blocks.target_depth
    if target is None:
        raise ConfigError("prune-blocks needs blocks.target_depth (--target-depth)")
    train, _ = load_data(cfg)
    proxy = build_proxy(train, cfg.score.proxy_size, seed=cfg.score.proxy_seed, source=train.name)
    if cfg.blocks.mode == "progressive":
        pruned, recipe, hist = progressive_block_prune(model, proxy, target)
        rows = [{"step": i, "removed": s.candidate, "score": s.score, "depth": s.depth_after}
                for i, s in enumerate(hist)]
    elif cfg.blocks.mode == "one_shot":
        pruned, recipe, chosen = one_shot_block_prune(model, proxy, model.spec.depth - target)
        rows = [{"step": i, "removed": c, "depth": target} for i, c in enumerate(chosen)]
    else:
        raise ConfigError(f"blocks.mode must be progressive or one_shot, got {cfg.blocks.mode!r}")
    out = _require_out(args)
    run.save_model(pruned, out, {"verb": "prune-blocks"})
    run.write_text(args.recipe or str(out) + ".recipe", recipe.to_text())
    tsv(rows, sys.stdout)
    return out


def cmd_distill(run: Run):
    args = run.args
    student = run.load_model(args.model)
    teacher = run.load_model(args.teacher) if args.teacher else None
    train, ev = load_data(run.cfg)
    out = _require_out(args)
    model, _ = _finetune(run, student, teacher, train, ev)
    run.save_model(model, out, {"verb": "distill"})
    return out


def cmd_eval(run: Run):
    from .model import accuracy

    args = run.args
    model = run.load_model(args.model)
    train, ev = load_data(run.cfg)
    ds = train if args.split == "train" else ev
    acc = accuracy(model, ds.images, ds.labels)
    rows = [{"model": args.model, "split": args.split, "n": len(ds), "top1": acc}]
    text = tsv(rows, sys.stdout)
    if args.output:
        run.write_text(args.output, text)
        return Path(args.output)
    return None


def cmd_stats(run: Run):
    from .cost import deit_spec

    args = run.args
    if args.model:
        spec = run.load_model(args.model).spec
    elif args.preset:
        spec = deit_spec(args.preset.replace("deit-", ""))
    else:
        spec = spec_from_config(run.cfg)
    rows = _cost_rows(spec)
    total = rows[-1]["params"]
    text = tsv(rows, sys.stdout)
    print(f"params {total} ({total / 1e6:.1f}M)", file=sys.stderr)
    if args.output:
        run.write_text(args.output, text)
        return Path(args.output)
    return None


def hermetic_from_config(cfg: RunConfig):
    from .experiments import Hermetic

    m, t, a = cfg.model, cfg.train, cfg.ablate
    if m.variant != "vanilla":
        raise ConfigError("ablation studies run on the plain ViT variant")
    return Hermetic(image_size=m.image_size, patch_size=m.patch_size, in_channels=m.in_channels,
                    num_classes=m.num_classes, teacher_dim=m.embed_dim, teacher_depth=m.depth,
                    teacher_heads=m.num_heads, mlp_ratio=m.mlp_ratio, n_train=cfg.data.n_train,
                    n_eval=cfg.data.n_eval, teacher_epochs=a.teacher_epochs, epochs=a.epochs, lr=t.lr,
                    weight_decay=t.weight_decay, batch_size=t.batch_size, proxy_size=cfg.score.proxy_size,
                    student_dim=cfg.prune.embed_dim or m.embed_dim // 2,
                    student_heads=cfg.prune.heads or max(1, m.num_heads // 2), alpha=t.alpha, beta=t.beta)


def cmd_ablate(run: Run):
    from . import experiments as ex

    cfg = run.cfg
    h = hermetic_from_config(cfg)
    study = cfg.ablate.study
    rows: list[dict] = []
    for seed in cfg.ablate.seeds:
        b = ex.prepare(h, int(seed))
        if study == "heads":
            rows += ex.head_strategies(h, b)
        elif study == "distill":
            rows += ex.distill_strategies(h, b)
            rows.append({"seed": b.seed, "strategy": "scratch", "eval": ex.distill_vs_scratch(h, b)["scratch_eval"]})
        elif study == "pipeline":
            rows.append(ex.progressive_vs_one_shot(h, b))
        else:
            raise ConfigError(f"ablate.study must be heads, distill or pipeline, got {study!r}")
    text = tsv(rows, sys.stdout)
    out = _require_out(run.args)
    run.write_text(out, text)
    return out


COMMANDS = {
    "init": cmd_init, "train": cmd_train, "score": cmd_score, "prune": cmd_prune,
    "prune-blocks": cmd_prune_blocks, "distill": cmd_distill, "eval": cmd_eval,
    "stats": cmd_stats, "ablate": cmd_ablate,
}


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vitprune", description="ViT structured pruning toolkit")
    p.add_argument("--version", action="version", version=f"vitprune {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--threads", type=int, help="kernel threads (1 guarantees determinism)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output", "-o", help="primary output path")
        sp.add_argument("--manifest", help="manifest path (default: <output>.manifest.json)")
        return sp

    common(sub.add_parser("init", help="build and save a freshly initialized model"))
    sp = common(sub.add_parser("train", help="train without a teacher"))
    sp.add_argument("--model", help="start from this checkpoint instead of a fresh init")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--log", help="JSON-lines training log path")
    sp = common(sub.add_parser("score", help="compute the importance table"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--proxy-size", type=int)
    sp.add_argument("--no-blocks", action="store_true", help="skip block candidates")
    sp.add_argument("--blocks-only", action="store_true", help="skip channel scores")
    sp = common(sub.add_parser("prune", help="channel pruning by ratio or explicit target dims"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--table")
    sp.add_argument("--replay", help="apply an existing recipe instead of ranking")
    sp.add_argument("--ratio", type=float)
    sp.add_argument("--embed-dim", type=int)
    sp.add_argument("--attn-dim", type=int)
    sp.add_argument("--heads", type=int)
    sp.add_argument("--ffn-dim", type=int)
    sp.add_argument("--head-strategy", type=int, choices=(1, 2, 3))
    sp.add_argument("--recipe", help="recipe output path (default: <output>.recipe)")
    sp.add_argument("--allow-stale", action="store_true", help="accept a table computed for another model")
    sp = common(sub.add_parser("prune-blocks", help="remove blocks down to a target depth"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--target-depth", type=int)
    sp.add_argument("--block-mode", choices=("progressive", "one_shot"))
    sp.add_argument("--proxy-size", type=int)
    sp.add_argument("--recipe")
    sp = common(sub.add_parser("distill", help="fine-tune a student against a teacher"))
    sp.add_argument("--model", required=True, help="student checkpoint")
    sp.add_argument("--teacher")
    sp.add_argument("--strategy", choices=("soft", "hard", "soft_patch", "penultimate_mse", "none"))
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--log")
    sp = common(sub.add_parser("eval", help="top-1 accuracy on a split"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--split", choices=("train", "eval"), default="eval")
    sp = common(sub.add_parser("stats", help="parameter and MAC counts"))
    sp.add_argument("--model")
    sp.add_argument("--preset", choices=("deit-tiny", "deit-small", "deit-base"))
    sp = common(sub.add_parser("ablate", help="multi-seed comparison studies"))
    sp.add_argument("--study", choices=("heads", "distill", "pipeline"))
    sp.add_argument("--epochs", type=int)
    sp = sub.add_parser("rerun", help="re-execute a manifest and compare output digests")
    sp.add_argument("manifest")
    sp.add_argument("--check", action="store_true", help="exit 3 if any output differs")
    return p


def _error(e: BaseException, code: int, kind: str) -> int:
    rec = {"error": kind, "exit": code, "message": str(e).splitlines()[0] if str(e) else type(e).__name__}
    diags = getattr(e, "diagnostics", None)
    if diags:
        rec["diagnostics"] = [d.to_dict() for d in diags[:20]]
    print(json.dumps(rec), file=sys.stderr)
    return code


def rerun(manifest_path: str, check: bool) -> int:
    with open(manifest_path) as f:
        doc = json.load(f)
    if doc.get("format") != "VITPRUNE-MANIFEST":
        raise ConfigError(f"{manifest_path} is not a manifest")
    argv = list(doc["argv"])
    # the snapshot already includes every override, so drop --config/--set
    clean, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a in ("--config", "--set"):
            skip = True
            continue
        if a.startswith(("--config=", "--set=")):
            continue
        clean.append(a)
    with tempfile.NamedTemporaryFile("w", suffix=".yaml", delete=False) as tf:
        tf.write(config_from_dict(doc["config"]).to_yaml())
        snap = tf.name
    try:
        cwd = os.getcwd()
        os.chdir(doc.get("cwd", cwd))
        try:
            code = main(clean + ["--config", snap])
        finally:
            os.chdir(cwd)
    finally:
        os.unlink(snap)
    if code:
        return code
    from .persist import file_digest

    base = doc.get("cwd", os.getcwd())
    diffs = [p for p, d in doc["outputs"].items() if file_digest(os.path.join(base, p)) != d]
    for p in diffs:
        print(f"differs: {p}", file=sys.stderr)
    if not diffs:
        print(f"reproduced {len(doc['outputs'])} output(s) bit-exactly", file=sys.stderr)
    return 3 if (diffs and check) else 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and 2
    args.argv = argv
    try:
        if args.verb == "rerun":
            return rerun(args.manifest, args.check)
        try:
            cfg = resolve_config(args)
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from None
        from .tensor import backend, set_default_dtype

        backend.set_num_threads(cfg.threads)
        set_default_dtype(cfg.dtype)
        run = Run(args, cfg)
        primary = COMMANDS[args.verb](run)
        if primary is not None:
            run.manifest(primary)
        return 0
    except VitpruneError as e:
        return _error(e, e.exit_code, e.kind)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        return _error(e, 2, "config")
    except (ArithmeticError, FloatingPointError) as e:
        return _error(e, 4, "numeric")
    except (ValueError, IndexError, KeyError) as e:
        return _error(e, 3, "validation")


if __name__ == "__main__":
    sys.exit(main())
