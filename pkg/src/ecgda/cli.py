"""Command-line driver: ``ecgda <subcommand> [options]``.

Settings are resolved as dataclass defaults, then an optional ``--config`` file
(flat ``key = value`` lines, ``#`` comments), then explicit flags. Every
TrainConfig and PrepConfig field has a flag named after it with dashes
(``--batch-size``, ``--band-lo``); a few short aliases exist (``--tm``,
``--refresh-centroids``).
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import trainer as T
from .clusters import ClusterState
from .evaluate import emit_report, evaluate
from .net import BiClassifierNet
from .prep import PrepConfig, write_cache
from .records import augment
from .synth import generate_fixtures

log = logging.getLogger("ecgda")


class ConfigError(ValueError):
    pass


class StageOrderError(RuntimeError):
    pass


RUN_KEYS = {"source": str, "target": str, "out_dir": str, "augment": bool}
ALIASES = {"tm": "t_m", "refresh_centroids": "refresh_target_centroids"}


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _optional(conv):
    def parse(text):
        return None if str(text).strip().lower() in ("", "none", "null") else conv(text)
    return parse


_CONVERTERS = {"int": int, "float": float, "bool": _parse_bool, "str": str,
               "int | None": _optional(int), "str | None": _optional(str)}


def _field_types() -> dict[str, tuple[str, callable]]:
    """Setting name -> (owning section, converter)."""
    out = {}
    for section, cls in (("train", T.TrainConfig), ("prep", PrepConfig)):
        for f in fields(cls):
            out[f.name] = (section, _CONVERTERS[str(f.type)])
    for k, conv in RUN_KEYS.items():
        out[k] = ("run", _parse_bool if conv is bool else conv)
    return out


FIELDS = _field_types()


def canonical_key(key: str) -> str:
    k = key.strip().replace("-", "_")
    k = ALIASES.get(k, k)
    if k not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    return k


def read_config(path) -> dict[str, object]:
    """Parse a ``key = value`` file into typed settings."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            k = canonical_key(key)
            out[k] = FIELDS[k][1](value)
        except (ConfigError, ValueError) as exc:
            raise ConfigError(f"{path}:{n}: {exc}") from None
    return out


def resolve_settings(args: argparse.Namespace) -> dict[str, object]:
    settings = read_config(args.config) if getattr(args, "config", None) else {}
    for k in FIELDS:
        v = getattr(args, k, None)
        if v is not None:
            settings[k] = v
    return settings


def build_configs(settings: dict) -> tuple[T.TrainConfig, PrepConfig]:
    section = {k: FIELDS[k][0] for k in settings if k in FIELDS}
    train = {k: v for k, v in settings.items() if section.get(k) == "train"}
    prep = {k: v for k, v in settings.items() if section.get(k) == "prep"}
    try:
        return T.TrainConfig(**train), PrepConfig(**prep)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- arguments


def _add_setting_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("settings (override the config file)")
    for name, (section, conv) in FIELDS.items():
        if section == "run":
            continue
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=conv, default=None, metavar="V")
    for alias, name in ALIASES.items():
        g.add_argument("--" + alias.replace("_", "-"), dest=name, type=FIELDS[name][1], default=None, metavar="V",
                       help=f"alias of --{name.replace('_', '-')}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecgda", description="Unsupervised domain adaptation for ECG beat classification.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, data=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--out-dir", dest="out_dir", default=None)
        if data:
            p.add_argument("--source", default=None, help="source record directory or .seg cache")
            p.add_argument("--target", default=None, help="target record directory or .seg cache")
        _add_setting_flags(p)
        return p

    command("preprocess", "segment records into .seg caches")
    for name, text in (("pretrain", "stage 1: source pre-training"),
                       ("clusters", "stage 2: source cluster organisation + confident target selection"),
                       ("adapt", "stage 3: adaptation"),
                       ("run", "all three stages and a target report"),
                       ("baseline", "stage 1 only and a target report")):
        p = command(name, text)
        if name in ("adapt", "run", "baseline"):
            p.add_argument("--augment", dest="augment", action=argparse.BooleanOptionalAction, default=None,
                           help="evaluate on the augmented target (default: yes)")
            p.add_argument("--plot", action="store_true", help="also write confusion.png")

    p = command("eval", "evaluate a checkpoint on labeled data", data=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="record directory or .seg cache")
    p.add_argument("--augment", dest="augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--plot", action="store_true")

    p = sub.add_parser("gen-fixtures", help="write synthetic source/target record trees")
    p.add_argument("--out-dir", dest="out_dir", default="fixtures")
    p.add_argument("--shift", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-source", type=int, default=2000)
    p.add_argument("--n-target", type=int, default=2000)
    p.add_argument("--records", type=int, default=4, help="records per domain")
    return parser


# ----------------------------------------------------------------- commands


def _need(settings: dict, *keys: str) -> None:
    missing = [k for k in keys if not settings.get(k)]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    for k in keys:
        if k in ("source", "target") and not Path(settings[k]).exists():
            raise FileNotFoundError(f"{k} path does not exist: {settings[k]}")


def _out_dir(settings: dict) -> Path:
    out = Path(settings.get("out_dir") or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_stage(out: Path, stage: int, command: str) -> tuple[BiClassifierNet, dict]:
    path = out / f"stage{stage}.ckpt"
    if not path.is_file():
        prev = {1: "pretrain", 2: "clusters", 3: "adapt"}[stage]
        raise StageOrderError(f"{command}: {path} not found (run '{prev}' first)")
    return BiClassifierNet.load(path)


def _check_rr(meta: dict, rr_mean: int, path: Path) -> None:
    if meta.get("rr_mean") is not None and meta["rr_mean"] != rr_mean:
        raise StageOrderError(f"{path}: trained with rr_mean {meta['rr_mean']}, data gives {rr_mean}")


def cmd_preprocess(settings, cfg, prep) -> None:
    _need(settings, "source")
    out = _out_dir(settings)
    source, rr_mean = T.load_domain(settings["source"], "source", prep)
    write_cache(out / "source.seg", source, rr_mean, prep.target_fs)
    print(f"source: {len(source)} segments, L={source.length}, rr_mean={rr_mean} -> {out / 'source.seg'}")
    if settings.get("target"):
        _need(settings, "target")
        target, _ = T.load_domain(settings["target"], "target", prep, rr_mean=rr_mean)
        write_cache(out / "target.seg", target, rr_mean, prep.target_fs)
        print(f"target: {len(target)} segments -> {out / 'target.seg'}")


def cmd_pretrain(settings, cfg, prep) -> None:
    _need(settings, "source")
    out = _out_dir(settings)
    source, rr_mean = T.load_domain(settings["source"], "source", prep)
    _, report = T.run_stage1(source, cfg, out, rr_mean)
    print(f"pretrain: {cfg.e1} epochs, final total {report.epochs[-1]['total']:.4f} -> {out / 'stage1.ckpt'}")


def cmd_clusters(settings, cfg, prep) -> None:
    _need(settings, "source", "target")
    out = _out_dir(settings)
    model, meta = _load_stage(out, 1, "clusters")
    source, target, rr_mean = T.prepare(settings["source"], settings["target"], prep)
    _check_rr(meta, rr_mean, out / "stage1.ckpt")
    _, state = T.run_stage2(model, source, target, cfg, out, rr_mean)
    counts = " ".join(f"{k}:{v}" for k, v in sorted(state.confident_count.items()))
    print(f"clusters: confident target counts {counts} -> {out / 'clusters.txt'}")


def cmd_adapt(settings, cfg, prep) -> None:
    _need(settings, "source", "target")
    out = _out_dir(settings)
    model, meta = _load_stage(out, 2, "adapt")
    if not (out / "clusters.txt").is_file():
        raise StageOrderError(f"adapt: {out / 'clusters.txt'} not found (run 'clusters' first)")
    state = ClusterState.load(out / "clusters.txt")
    source, target, rr_mean = T.prepare(settings["source"], settings["target"], prep)
    _check_rr(meta, rr_mean, out / "stage2.ckpt")
    T.run_stage3(model, source, target, state, cfg, out, rr_mean)
    _report_if_labeled(model, target, cfg, out, "adapted", settings)


def _report_if_labeled(model, target, cfg, out, model_id, settings) -> None:
    if not target.labeled:
        print("target has no labels; skipping metrics.json")
        return
    aug = settings.get("augment", True)
    aug = True if aug is None else aug
    _, rep = T.final_report(model, target, cfg, out, model_id, augmented=aug, plot=settings.get("plot", False))
    print(f"{model_id}: target macro-F1 {rep.macro_f1:.2f}, accuracy {rep.overall_accuracy:.2f} -> {out / 'metrics.json'}")


def _run(settings, cfg, prep, skip_adaptation: bool) -> None:
    _need(settings, "source", "target")
    out = _out_dir(settings)
    aug = settings.get("augment")
    _, _, _, rep = T.run_pipeline(settings["source"], settings["target"], cfg, out, prep,
                                  skip_adaptation=skip_adaptation, augmented_eval=True if aug is None else aug,
                                  plot=settings.get("plot", False))
    name = "baseline" if skip_adaptation else "adapted"
    print(f"{name}: target macro-F1 {rep.macro_f1:.2f}, accuracy {rep.overall_accuracy:.2f} -> {out / 'metrics.json'}")


def cmd_eval(settings, cfg, prep, args) -> None:
    ckpt, data = Path(args.ckpt), Path(args.data)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    if not data.exists():
        raise FileNotFoundError(f"data path does not exist: {data}")
    model, meta = BiClassifierNet.load(ckpt)
    ds, _ = T.load_domain(data, "target", prep, rr_mean=meta.get("rr_mean"))
    aug = settings.get("augment")
    aug = True if aug is None else aug
    if aug:
        ds = augment(ds, cfg.factors)
    cm, rep = evaluate(model, ds, data.name, ckpt.stem, aug)
    out = _out_dir(settings)
    emit_report(rep, cm, out, plot=args.plot)
    print(f"eval {ckpt.name} on {data}: macro-F1 {rep.macro_f1:.2f}, accuracy {rep.overall_accuracy:.2f} -> {out / 'metrics.json'}")


def cmd_gen_fixtures(args) -> None:
    src, tgt = generate_fixtures(args.out_dir, shift=args.shift, seed=args.seed, n_source=args.n_source,
                                 n_target=args.n_target, records_per_domain=args.records)
    print(f"wrote {src} and {tgt}")


COMMANDS = {"preprocess": cmd_preprocess, "pretrain": cmd_pretrain, "clusters": cmd_clusters, "adapt": cmd_adapt,
            "run": lambda s, c, p: _run(s, c, p, False), "baseline": lambda s, c, p: _run(s, c, p, True)}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-fixtures":
            cmd_gen_fixtures(args)
            return 0
        settings = resolve_settings(args)
        if args.command in ("adapt", "run", "baseline", "eval"):
            settings["plot"] = args.plot
        cfg, prep = build_configs(settings)
        if args.command == "eval":
            cmd_eval(settings, cfg, prep, args)
        else:
            COMMANDS[args.command](settings, cfg, prep)
    except (ConfigError, StageOrderError, T.StageError, FileNotFoundError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"ecgda {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
