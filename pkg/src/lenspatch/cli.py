"""Command-line entry point wiring the pipeline stages together.

Every subcommand reads an :class:`ExperimentConfig` (JSON, optional) and works
inside its ``workdir``::

    backgrounds/   signs/   victims/   pairs/   tnet/   db/<kind>-s<seed>-<mode>/   results/

Stage seeds are derived from the master seed and the stage name, so any stage
can be rerun alone and reproduce its outputs.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .attack import ALL, AttackConfig, PerturbationRecord, craft_uap
from .defenses import DefenseConfig, eval_defense
from .errors import ConfigurationError
from .optics import BackgroundPool, EnvRanges, OpticsConfig
from .perturb import DotSpec
from .serving import (ASR_COLUMNS, PerturbDB, SignMap, db_get, db_put, eval_asr, read_csv, sample_routes,
                      simulate_route, transfer_eval, write_csv)
from .surrogate import ARCHITECTURES, PairDataset, SurrogateHyper, SurrogateModel, eval_surrogate, gen_pairs, train_surrogate
from .utils import derive_seed, read_json, stable_hash, write_json
from .victim import SignDataset, SignWorld, VictimModel, VictimTraining, gen_sign_dataset, train_classifier, train_detector

DEFAULT_LUX_GRID = (120.0, 180.0, 300.0, 600.0, 1500.0, 3000.0)


@dataclass
class ExperimentConfig:
    workdir: str = "lenspatch-work"
    backgrounds: str = ""
    db: str = ""
    n_backgrounds: int = 32
    master_seed: int = 0
    optics: dict = field(default_factory=dict)
    dot_spec: dict = field(default_factory=dict)
    env_ranges: dict = field(default_factory=dict)
    victim: dict = field(default_factory=lambda: {"per_class": 500, "empty_fraction": 0.5, "epochs": 12,
                                                  "widths": [16, 32, 64], "threshold": 0.6,
                                                  "min_accuracy": 0.9})
    surrogate: dict = field(default_factory=lambda: {"pairs": 2000, "dot_counts": [10, 30, 50],
                                                     "arch": "skip-unet", "hyper": {}})
    attack: dict = field(default_factory=dict)
    lux_grid: list = field(default_factory=lambda: list(DEFAULT_LUX_GRID))
    eval: dict = field(default_factory=lambda: {"frames_per_level": 100, "frames_per_sign": 20,
                                                "route_len": 100, "map_positions": 200, "lookup_error": 0.0})

    @classmethod
    def load(cls, path):
        data = read_json(path)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        for k, v in data.items():
            cur = getattr(base, k)
            setattr(base, k, {**cur, **v} if isinstance(cur, dict) and isinstance(v, dict) else v)
        return base

    def hash(self):
        d = asdict(self)
        d.pop("workdir")
        return stable_hash(d)

    def seed(self, stage):
        return derive_seed(self.master_seed, stage)

    @property
    def root(self):
        return Path(self.workdir)

    def path(self, *parts):
        return self.root.joinpath(*parts)

    def optics_config(self):
        return OpticsConfig.from_dict(self.optics) if self.optics else OpticsConfig()

    def env_ranges_config(self):
        return EnvRanges(**{"n_backgrounds": self.n_backgrounds, **self.env_ranges})

    def dot_spec_config(self):
        return DotSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.dot_spec.items()})

    def attack_config(self, mode, kind):
        fields = {k: tuple(v) if isinstance(v, list) and k == "block_grid" else v for k, v in self.attack.items()}
        return AttackConfig(**{**fields, "mode": mode, "objective_kind": kind})

    def provenance(self):
        return {"config_hash": self.hash(), "master_seed": self.master_seed}

    def db_dir(self, kind, victim_seed, mode):
        base = Path(self.db) if self.db else self.path("db")
        return base / f"{kind}-s{victim_seed}-{mode}"


def _require(path, what):
    if not Path(path).exists():
        raise ConfigurationError(f"{what} not found: {path}")
    return Path(path)


def _backgrounds(cfg, create=False):
    src = Path(cfg.backgrounds) if cfg.backgrounds else cfg.path("backgrounds")
    if (src / "manifest.json").exists():
        return BackgroundPool.load(src)
    if not create:
        raise ConfigurationError(f"background pool not found: {src} (run gen-signs first)")
    BackgroundPool.generate(cfg.n_backgrounds, seed=cfg.seed("backgrounds")).save(src)
    # reload so every stage sees the same 8-bit pixels
    return BackgroundPool.load(src)


def _world(cfg, create=False):
    return SignWorld(_backgrounds(cfg, create), cfg.optics_config(), cfg.env_ranges_config())


def _victim_path(cfg, kind, seed):
    return cfg.path("victims", f"{kind}-s{seed}.ckpt")


def _load_victim(cfg, kind, seed):
    return VictimModel.load(_require(_victim_path(cfg, kind, seed), f"{kind} checkpoint"))


def _tnet_path(cfg, arch):
    return cfg.path("tnet", f"{arch}.ckpt")


def _results(cfg, name):
    d = cfg.path("results")
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def _class_arg(text):
    if text.upper() == ALL:
        return ALL
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"class must be an integer id or ALL, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# -- subcommands ---------------------------------------------------------------------

def cmd_gen_signs(cfg, args):
    world = _world(cfg, create=True)
    v = cfg.victim
    per_class = args.per_class or v["per_class"]
    ds = gen_sign_dataset(world, per_class, cfg.seed("gen-signs"), empty_fraction=v.get("empty_fraction", 0.0))
    ds.save(cfg.path("signs"))
    write_json(cfg.path("signs", "manifest.json"), {**cfg.provenance(), "frames": len(ds), "per_class": per_class})
    return f"wrote {len(ds)} frames to {cfg.path('signs')}"


def cmd_train_victim(cfg, args):
    ds = SignDataset.load(_require(cfg.path("signs"), "sign dataset"))
    v = cfg.victim
    seed = derive_seed(cfg.master_seed, f"train-victim:{args.kind}:{args.seed}")
    training = VictimTraining(epochs=args.epochs or v["epochs"], widths=tuple(v["widths"]),
                              min_accuracy=v.get("min_accuracy", 0.9))
    if args.kind == "classifier":
        model = train_classifier(ds, seed, training)
    else:
        training = replace(training, squeeze_prob=0.0, randomize_prob=0.0)
        model = train_detector(ds, seed, training, threshold=v.get("threshold", 0.6))
    model.seed = args.seed
    model.meta.update(cfg.provenance())
    path = _victim_path(cfg, args.kind, args.seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path)
    write_json(path.with_suffix(".json"), {**cfg.provenance(), "kind": args.kind, "seed": args.seed,
                                           "accuracy": model.accuracy})
    return f"{args.kind} seed {args.seed}: held-out accuracy {model.accuracy:.4f} -> {path}"


def cmd_gen_pairs(cfg, args):
    s = cfg.surrogate
    counts = args.dots or s.get("dot_counts")
    data = gen_pairs(args.count or s["pairs"], cfg.dot_spec_config(), cfg.optics_config(), cfg.seed("gen-pairs"),
                     dot_counts=counts)
    data.meta.update(cfg.provenance())
    data.save(cfg.path("pairs"))
    return f"wrote {len(data)} pairs to {cfg.path('pairs')}"


def cmd_train_tnet(cfg, args):
    data = PairDataset.load(_require(cfg.path("pairs", "manifest.json"), "pair dataset").parent)
    hyper = SurrogateHyper(**{**cfg.surrogate.get("hyper", {}), **({"epochs": args.epochs} if args.epochs else {})})
    model, history = train_surrogate(data, args.arch, hyper, cfg.seed(f"train-tnet:{args.arch}"))
    model.meta.update(cfg.provenance())
    path = _tnet_path(cfg, args.arch)
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path)
    _, val = data.split(hyper.train_fraction)
    rep = eval_surrogate(model, val)
    ident = eval_surrogate(lambda d: np.asarray(d, dtype=np.float64), val)
    rows = [{"model": args.arch, **rep.as_dict()}, {"model": "identity", **ident.as_dict()}]
    write_csv(_results(cfg, f"tnet-{args.arch}.csv"), rows, ("model", "mse", "psnr", "ssim", "perceptual"),
              cfg.provenance())
    write_csv(_results(cfg, f"tnet-{args.arch}-history.csv"), history,
              ("epoch", "train_loss", "train_mse", "val_loss", "val_mse"), cfg.provenance())
    return f"{args.arch}: validation mse {rep.mse:.5f} (identity {ident.mse:.5f}) -> {path}"


def cmd_craft(cfg, args):
    victim = _load_victim(cfg, args.kind, args.victim_seed)
    surrogate = None
    if args.mode != "no_tnet":
        path = _tnet_path(cfg, args.arch)
        if not path.exists():
            if args.mode == "random":
                surrogate = None
            else:
                raise ConfigurationError(f"surrogate checkpoint not found: {path}")
        else:
            surrogate = SurrogateModel.load(path)
    world = _world(cfg)
    acfg = cfg.attack_config(args.mode, args.kind)
    key = args.target if args.target == ALL else f"{args.target:02d}"
    seed = cfg.seed(f"craft:{args.kind}:{args.victim_seed}:{args.mode}:{key}")
    record = craft_uap(args.target, victim, surrogate, world, acfg, seed)
    db = PerturbDB(cfg.db_dir(args.kind, args.victim_seed, args.mode))
    db_put(db, record)
    return f"class {key} ({args.mode}): training ASR {record.train_asr:.3f}, record {record.record_id}"


def _load_record(cfg, args):
    if args.record:
        return PerturbationRecord.from_dict(read_json(_require(args.record, "record")))
    db_dir = _require(cfg.db_dir(args.kind, args.victim_seed, args.mode), "perturbation database")
    return db_get(PerturbDB(db_dir), args.target)


def cmd_eval_asr(cfg, args):
    victim = _load_victim(cfg, args.kind, args.victim_seed)
    record = _load_record(cfg, args)
    lux = args.lux_grid or cfg.lux_grid
    rows = eval_asr(record, victim, _world(cfg), lux, cfg.eval["frames_per_level"], cfg.seed("eval-asr"),
                    nd_filter=args.nd)
    name = f"asr-{args.kind}-s{args.victim_seed}-{record.key}-{record.mode}{'-nd' if args.nd else ''}.csv"
    write_csv(_results(cfg, name), rows, ASR_COLUMNS, {**cfg.provenance(), "nd_filter": int(args.nd)})
    return " ".join(f"{r['lux']:g}:{r['asr']:.3f}" for r in rows)


def cmd_route_sim(cfg, args):
    victim = _load_victim(cfg, args.kind, args.victim_seed)
    db = PerturbDB(_require(cfg.db_dir(args.kind, args.victim_seed, "full"), "perturbation database"))
    world = _world(cfg)
    e = cfg.eval
    sign_map = SignMap.generate(e["map_positions"], cfg.seed("sign-map"))
    routes = sample_routes(sign_map, args.routes, e["route_len"], cfg.seed("routes"))
    rows = []
    for i, route in enumerate(routes):
        res = simulate_route(route, sign_map, args.mode, db, victim, world, e["frames_per_sign"],
                             derive_seed(cfg.master_seed, f"route:{i}"), e.get("lookup_error", 0.0))
        rows.append({"route": i, "asr": res.asr, "n_frames": res.n_frames, "fallbacks": res.fallbacks})
    write_csv(_results(cfg, f"routes-{args.mode}.csv"), rows, ("route", "asr", "n_frames", "fallbacks"),
              cfg.provenance())
    mean = float(np.mean([r["asr"] for r in rows])) if rows else 0.0
    write_json(_results(cfg, f"routes-{args.mode}.json"), {**cfg.provenance(), "mode": args.mode,
                                                          "routes": len(rows), "mean_asr": round(mean, 6)})
    write_json(_results(cfg, "sign-map.json"), sign_map.to_dict())
    return f"{args.mode}: mean ASR {mean:.3f} over {len(rows)} routes"


def cmd_transfer(cfg, args):
    world = _world(cfg)
    seeds = args.victims or [0, 1]
    victims = [_load_victim(cfg, args.kind, s) for s in seeds]
    if args.records:
        records = [PerturbationRecord.from_dict(read_json(_require(p, "record"))) for p in args.records]
    else:
        records = [db_get(PerturbDB(_require(cfg.db_dir(args.kind, s, "full"), "perturbation database")), args.target)
                   for s in seeds]
    lux = args.lux or cfg.lux_grid[0]
    m = transfer_eval(records, victims, world, lux, cfg.eval["frames_per_level"], cfg.seed("transfer"))
    cols = ["record_id"] + [f"victim_s{s}" for s in seeds]
    rows = [{"record_id": r.record_id, **{c: v for c, v in zip(cols[1:], row)}} for r, row in zip(records, m)]
    write_csv(_results(cfg, "transfer.csv"), rows, cols, {**cfg.provenance(), "lux": lux})
    return "; ".join(" ".join(f"{v:.3f}" for v in row) for row in m)


def cmd_defend(cfg, args):
    victim = _load_victim(cfg, "classifier", args.victim_seed)
    db = PerturbDB(_require(cfg.db_dir("classifier", args.victim_seed, "full"), "perturbation database"))
    keys = [k for k in db.keys() if k != ALL]
    if not keys:
        raise ConfigurationError(f"no per-class records in {db.directory}")
    records = [db_get(db, k) for k in keys]
    defense = DefenseConfig(kind=args.defense, bits=args.bits if args.defense == "squeeze" else 8)
    rows = eval_defense(defense, records, victim, _world(cfg), args.lux_grid or cfg.lux_grid,
                        cfg.eval["frames_per_level"], cfg.seed("defend"))
    name = f"defend-{rows[0]['defense']}.csv"
    write_csv(_results(cfg, name), rows, ("defense", "lux", "asr", "baseline_asr", "adv_acc", "benign_acc",
                                          "baseline_benign_acc", "n_frames"), cfg.provenance())
    return " ".join(f"{r['lux']:g}:{r['asr']:.3f}" for r in rows)


def cmd_report(cfg, args):
    results = _require(cfg.path("results"), "results directory")
    rows = []
    curves = {}
    for path in sorted(results.glob("*.csv")):
        if path.name == "summary.csv":
            continue
        _, table = read_csv(path)
        for r in table:
            if "asr" in r:
                rows.append({"source": path.stem, "lux": r.get("lux", ""), "asr": r["asr"],
                             "n_frames": r.get("n_frames", "")})
        if path.name.startswith(("asr-", "defend-")):
            curves[path.stem] = ([float(r["lux"]) for r in table], [float(r["asr"]) for r in table])
    write_csv(results / "summary.csv", rows, ("source", "lux", "asr", "n_frames"), cfg.provenance())
    if curves:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        for name, (lux, asr) in curves.items():
            ax.plot(lux, asr, marker="o", label=name)
        ax.set_xscale("log")
        ax.set_xlabel("illuminance (lux)")
        ax.set_ylabel("attack success rate")
        ax.set_ylim(0, 1)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(results / "asr_vs_lux.png", metadata={"Software": None})
        plt.close(fig)
    return f"summarized {len(rows)} rows from {results}"


# -- argument parsing ------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="lenspatch", description="Optical dot-perturbation attack pipeline.")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--workdir", help="override the config workdir")
    p.add_argument("--seed", dest="master_seed", type=int, help="override the master seed")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-signs", help="synthesize the sign dataset")
    s.add_argument("--per-class", type=int)
    s.set_defaults(func=cmd_gen_signs)

    s = sub.add_parser("train-victim", help="train a classifier or detector")
    s.add_argument("--kind", choices=("classifier", "detector"), default="classifier")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train_victim)

    s = sub.add_parser("gen-pairs", help="render perturbation pairs through the oracle channel")
    s.add_argument("--count", type=int)
    s.add_argument("--dots", type=_int_list, help="comma-separated dot counts")
    s.set_defaults(func=cmd_gen_pairs)

    s = sub.add_parser("train-tnet", help="train a surrogate channel model")
    s.add_argument("--arch", choices=ARCHITECTURES, default="skip-unet")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train_tnet)

    def victim_args(s, kind=True):
        if kind:
            s.add_argument("--kind", choices=("classifier", "detector"), default="classifier")
        s.add_argument("--victim-seed", type=int, default=0)

    s = sub.add_parser("craft", help="craft a perturbation and store it in the database")
    s.add_argument("--class", dest="target", type=_class_arg, required=True)
    s.add_argument("--mode", choices=("full", "no_tnet", "random", "static_env"), default="full")
    s.add_argument("--arch", choices=ARCHITECTURES, default="skip-unet")
    victim_args(s)
    s.set_defaults(func=cmd_craft)

    s = sub.add_parser("eval-asr", help="ASR of a record across illuminance levels")
    s.add_argument("--record", help="record JSON file (instead of --class)")
    s.add_argument("--class", dest="target", type=_class_arg)
    s.add_argument("--mode", choices=("full", "no_tnet", "random", "static_env"), default="full")
    s.add_argument("--lux-grid", type=_float_list)
    s.add_argument("--nd", action="store_true", help="ND filter in front of the camera")
    victim_args(s)
    s.set_defaults(func=cmd_eval_asr)

    s = sub.add_parser("route-sim", help="dynamic vs static attack over sampled routes")
    s.add_argument("--routes", type=int, default=100)
    s.add_argument("--mode", choices=("dynamic", "static"), default="dynamic")
    victim_args(s)
    s.set_defaults(func=cmd_route_sim)

    s = sub.add_parser("transfer", help="cross-model ASR matrix")
    s.add_argument("--records", nargs="*", help="record JSON files")
    s.add_argument("--class", dest="target", type=_class_arg, default=0)
    s.add_argument("--victims", type=_int_list, help="comma-separated victim seeds")
    s.add_argument("--lux", type=float)
    s.add_argument("--kind", choices=("classifier", "detector"), default="classifier")
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("defend", help="ASR under an input-transformation defense")
    s.add_argument("--defense", choices=("squeeze", "randomize"), required=True)
    s.add_argument("--bits", type=int, default=8)
    s.add_argument("--lux-grid", type=_float_list)
    victim_args(s, kind=False)
    s.set_defaults(func=cmd_defend)

    s = sub.add_parser("report", help="aggregate result CSVs and plot ASR curves")
    s.set_defaults(func=cmd_report)
    return p


def make_config(args):
    cfg = ExperimentConfig.load(_require(args.config, "config")) if args.config else ExperimentConfig()
    if args.workdir:
        cfg.workdir = args.workdir
    if args.master_seed is not None:
        cfg.master_seed = args.master_seed
    return cfg


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = make_config(args)
        if args.command == "eval-asr" and args.record is None and args.target is None:
            raise ConfigurationError("eval-asr needs --record or --class")
        cfg.root.mkdir(parents=True, exist_ok=True)
        write_json(cfg.path("config.json"), asdict(cfg))
        message = args.func(cfg, args)
    except (ValueError, RuntimeError, KeyError, TypeError, OSError) as exc:
        text = " ".join(str(exc).split()) or type(exc).__name__
        print(f"lenspatch {args.command}: error: {type(exc).__name__}: {text}", file=sys.stderr)
        return 2
    print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
