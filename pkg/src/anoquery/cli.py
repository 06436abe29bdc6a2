"""Command-line harness: synth, train, eval, bench, ablate, serve.

All outputs are plain CSV/JSON with no timestamps, so a fixed seed
reproduces every file byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine, policy, trainer
from .data import DataError, RawDataset, load_datasets, write_csv
from .policy import PpoHyper
from .trainer import EnvConfig

DEFAULT_CHECKPOINTS = (20, 40, 60, 80, 100)

FEATURE_GROUPS = {
    "detector": (0,),
    "anomaly": (1, 2, 3),
    "normality": (4, 5),
}


class ConfigError(ValueError):
    """Invalid configuration value; the message names the field."""


# ---------------------------------------------------------------------------
# synthetic data


def generate_synthetic(
    seed: int,
    n: int = 2000,
    d: int = 2,
    anomaly_frac: float = 0.03,
    n_clusters: int = 3,
) -> RawDataset:
    """One synthetic dataset: Gaussian clusters as normal data plus
    anomalies drawn uniformly over the clusters' 1.5x-expanded bounding box.

    Clusters get random anisotropic covariances and uneven weights, so the
    unsupervised detector's ranking is imperfect and analyst feedback has
    room to help. The anomaly count is floor(anomaly_frac * n).
    """
    if not 0.0 < anomaly_frac < 1.0:
        raise ConfigError(f"anomaly_frac: must be in (0, 1), got {anomaly_frac}")
    if d < 1:
        raise ConfigError(f"d: must be >= 1, got {d}")
    rng = np.random.Generator(np.random.PCG64(seed))
    n_anom = int(math.floor(anomaly_frac * n))
    n_norm = n - n_anom

    # cluster means separated by at least 6 units
    while True:
        means = rng.uniform(-8.0, 8.0, size=(n_clusters, d))
        gaps = [
            np.linalg.norm(means[a] - means[b])
            for a in range(n_clusters)
            for b in range(a + 1, n_clusters)
        ]
        if min(gaps) >= 6.0:
            break

    weights = rng.dirichlet(np.full(n_clusters, 3.0))
    assignment = rng.choice(n_clusters, size=n_norm, p=weights)
    normals = np.empty((n_norm, d))
    for c in range(n_clusters):
        rows = np.flatnonzero(assignment == c)
        scales = rng.uniform(0.25, 0.9, size=d)
        basis = np.linalg.qr(rng.standard_normal((d, d)))[0]
        normals[rows] = rng.standard_normal((len(rows), d)) @ (basis * scales).T + means[c]

    lo, hi = normals.min(axis=0), normals.max(axis=0)
    center, half = (lo + hi) / 2.0, (hi - lo) / 2.0 * 1.5
    anomalies = rng.uniform(center - half, center + half, size=(n_anom, d))

    X = np.vstack([normals, anomalies])
    y = np.concatenate([np.zeros(n_norm, dtype=np.int8), np.ones(n_anom, dtype=np.int8)])
    perm = rng.permutation(n)
    return RawDataset(name=f"synth{seed:03d}_d{d}", X=X[perm], y=y[perm])


def cmd_synth(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dims = [int(x) for x in args.dims.split(",")]
    entries = []
    for k in range(args.count):
        seed = args.seed + k
        ds = generate_synthetic(
            seed, n=args.n, d=dims[k % len(dims)], anomaly_frac=args.anomaly_frac
        )
        path = out_dir / f"{ds.name}.csv"
        write_csv(ds, path)
        entries.append({"name": ds.name, "path": path.name, "label_column": "label"})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"datasets": entries}, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {args.count} datasets and {manifest}")
    return 0


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    manifest: str
    model_out: str
    seed: int
    datasets: list[str] | None = None
    log_out: str | None = None
    total_timesteps: int = 200_000
    gamma: float = 0.6
    negative_reward: float = trainer.NEGATIVE_REWARD
    feature_mask: tuple[int, ...] = ()
    episode_limit: int = trainer.EPISODE_LIMIT

    @classmethod
    def from_dict(cls, doc: dict, base: Path | None = None) -> "TrainConfig":
        def need(fld, types, check=None, msg=""):
            if fld not in doc:
                raise ConfigError(f"{fld}: required field is missing")
            v = doc[fld]
            if not isinstance(v, types) or (check and not check(v)):
                raise ConfigError(f"{fld}: {msg or 'invalid value'} (got {v!r})")
            return v

        manifest = need("manifest", str)
        model_out = need("model_out", str)
        seed = need("seed", int, lambda v: not isinstance(v, bool))
        cfg = cls(
            manifest=str((base / manifest) if base else manifest),
            model_out=str((base / model_out) if base else model_out),
            seed=seed,
        )
        if "datasets" in doc:
            if not isinstance(doc["datasets"], list):
                raise ConfigError("datasets: expected a list of names")
            cfg.datasets = [str(x) for x in doc["datasets"]]
        if "log_out" in doc:
            cfg.log_out = str((base / doc["log_out"]) if base else doc["log_out"])
        for fld, types, check in [
            ("total_timesteps", int, lambda v: v >= 1),
            ("gamma", (int, float), lambda v: 0 < v < 1),
            ("negative_reward", (int, float), None),
            ("episode_limit", int, lambda v: v >= 1),
        ]:
            if fld in doc:
                v = doc[fld]
                if not isinstance(v, types) or isinstance(v, bool) or (check and not check(v)):
                    raise ConfigError(f"{fld}: invalid value (got {v!r})")
                setattr(cfg, fld, v)
        if "feature_mask" in doc:
            m = doc["feature_mask"]
            if not isinstance(m, list) or any(not isinstance(c, int) or not 0 <= c < 6 for c in m):
                raise ConfigError("feature_mask: expected a list of column indices in [0, 6)")
            cfg.feature_mask = tuple(sorted(m))
        return cfg


def run_train(cfg: TrainConfig) -> trainer.TrainResult:
    datasets = load_datasets(cfg.manifest, cfg.datasets)
    hyper = PpoHyper(gamma=cfg.gamma, total_timesteps=cfg.total_timesteps)
    env_cfg = EnvConfig(
        episode_limit=cfg.episode_limit,
        negative_reward=cfg.negative_reward,
        feature_mask=cfg.feature_mask,
    )
    result = trainer.train(datasets, hyper, seed=cfg.seed, env_cfg=env_cfg)
    policy.save_model(result.model, cfg.model_out)
    if cfg.log_out:
        write_training_log(result.diagnostics, cfg.log_out)
    return result


def write_training_log(diagnostics: list[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "mean_reward", "mean_episode_return", "policy_loss", "value_loss", "entropy"]
        )
        for row in diagnostics:
            writer.writerow(
                [
                    row["step"],
                    repr(row["mean_reward"]),
                    "" if row["mean_episode_return"] is None else repr(row["mean_episode_return"]),
                    repr(row["policy_loss"]),
                    repr(row["value_loss"]),
                    repr(row["entropy"]),
                ]
            )


def _load_train_config(args) -> TrainConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config: file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from None
        return TrainConfig.from_dict(doc, base=path.parent)
    if not args.manifest or not args.model_out or args.seed is None:
        raise ConfigError("manifest/model_out/seed: required unless --config is given")
    return TrainConfig(
        manifest=args.manifest,
        model_out=args.model_out,
        seed=args.seed,
        datasets=args.datasets.split(",") if args.datasets else None,
        log_out=args.log_out,
        total_timesteps=args.total_timesteps,
        gamma=args.gamma,
        negative_reward=args.negative_reward,
        feature_mask=_parse_mask(args.feature_mask),
    )


def _parse_mask(text: str | None) -> tuple[int, ...]:
    if not text:
        return ()
    if text in FEATURE_GROUPS:
        return FEATURE_GROUPS[text]
    try:
        cols = tuple(sorted(int(x) for x in text.split(",")))
    except ValueError:
        raise ConfigError(f"feature_mask: expected column list or group name, got {text!r}")
    if any(not 0 <= c < 6 for c in cols):
        raise ConfigError(f"feature_mask: column indices must be in [0, 6), got {cols}")
    return cols


def cmd_train(args) -> int:
    cfg = _load_train_config(args)
    result = run_train(cfg)
    print(
        f"trained {cfg.total_timesteps} steps in {result.elapsed_seconds:.1f}s "
        f"-> {cfg.model_out}"
    )
    return 0


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class BenchConfig:
    manifest: str
    train: list[str]
    eval: list[str]
    budget: int = engine.DEFAULT_BUDGET
    runs: int = 5
    seeds: list[int] = field(default_factory=list)
    checkpoints: tuple[int, ...] = DEFAULT_CHECKPOINTS
    feature_mask: tuple[int, ...] = ()
    negative_reward: float = trainer.NEGATIVE_REWARD
    gamma: float = 0.6
    total_timesteps: int = 200_000

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError(f"runs: must be >= 1, got {self.runs}")
        if set(self.train) & set(self.eval):
            raise ConfigError(
                f"train/eval: sets must be disjoint, overlap {sorted(set(self.train) & set(self.eval))}"
            )
        if not self.seeds:
            self.seeds = list(range(self.runs))
        if len(self.seeds) != self.runs:
            raise ConfigError(f"seeds: expected {self.runs} entries, got {len(self.seeds)}")


def evaluate_model(
    model: policy.PolicyModel,
    datasets: list[RawDataset],
    budget: int,
    seeds: list[int],
    checkpoints: tuple[int, ...],
    out_dir: Path | None = None,
    feature_mask: tuple[int, ...] = (),
) -> list[dict]:
    """Run simulated sessions and the unsupervised baseline per (dataset,
    seed); returns aggregate rows and optionally writes per-run curves."""
    rows = []
    for ds in datasets:
        if ds.y is None:
            raise DataError(f"dataset {ds.name!r} has no labels; cannot evaluate")
        per_method: dict[str, list[np.ndarray]] = {"policy": [], "unsupervised": []}
        for seed in seeds:
            session = engine.session_open(
                ds, model, budget=budget, seed=seed, feature_mask=feature_mask
            )
            y = ds.y
            while not session.exhausted:
                idx, _ = engine.next_query(session)
                answer = (
                    engine.Label.ANOMALY if y[idx] == 1 else engine.Label.NORMAL
                )
                engine.submit_label(session, idx, answer)
            curve = np.asarray(session.curve, dtype=np.int64)
            per_method["policy"].append(curve)
            per_method["unsupervised"].append(
                engine.unsupervised_curve(session.scores, y, budget)
            )
            if out_dir is not None:
                engine.write_curve_csv(session, out_dir / f"{ds.name}__policy__seed{seed}.csv")
                _write_plain_curve(
                    per_method["unsupervised"][-1],
                    out_dir / f"{ds.name}__unsupervised__seed{seed}.csv",
                )
        for method, curves in per_method.items():
            for ckpt in checkpoints:
                vals = np.array([c[min(ckpt, len(c)) - 1] for c in curves], dtype=np.float64)
                stderr = 0.0 if len(vals) < 2 else float(vals.std(ddof=1) / np.sqrt(len(vals)))
                rows.append(
                    {
                        "dataset": ds.name,
                        "method": method,
                        "checkpoint": ckpt,
                        "mean": float(vals.mean()),
                        "stderr": stderr,
                    }
                )
    return rows


def _write_plain_curve(curve: np.ndarray, path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_index", "cumulative_anomalies"])
        for t, v in enumerate(curve, start=1):
            writer.writerow([t, int(v)])


def write_report(rows: list[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "method", "checkpoint", "mean", "stderr"])
        for r in rows:
            writer.writerow(
                [r["dataset"], r["method"], r["checkpoint"], repr(r["mean"]), repr(r["stderr"])]
            )


def cmd_eval(args) -> int:
    model = policy.load_model(args.model)
    names = args.datasets.split(",") if args.datasets else None
    datasets = load_datasets(args.manifest, names)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(range(args.runs))
    if len(seeds) != args.runs:
        raise ConfigError(f"seeds: expected {args.runs} entries, got {len(seeds)}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = evaluate_model(
        model,
        datasets,
        budget=args.budget,
        seeds=seeds,
        checkpoints=tuple(int(c) for c in args.checkpoints.split(",")),
        out_dir=out_dir,
        feature_mask=_parse_mask(args.feature_mask),
    )
    write_report(rows, out_dir / "report.csv")
    print(f"wrote {out_dir / 'report.csv'} ({len(rows)} rows)")
    return 0


def cmd_bench(args) -> int:
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError(f"config: file not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    for fld in ("manifest", "train", "eval"):
        if fld not in doc:
            raise ConfigError(f"{fld}: required field is missing")
    runs = doc.get("runs", 5)
    seeds = list(doc.get("seeds", [])) or [args.seed + i for i in range(runs)]
    cfg = BenchConfig(
        manifest=str(path.parent / doc["manifest"]),
        train=list(doc["train"]),
        eval=list(doc["eval"]),
        budget=doc.get("budget", engine.DEFAULT_BUDGET),
        runs=runs,
        seeds=seeds,
        checkpoints=tuple(doc.get("checkpoints", DEFAULT_CHECKPOINTS)),
        feature_mask=tuple(doc.get("feature_mask", ())),
        negative_reward=doc.get("negative_reward", trainer.NEGATIVE_REWARD),
        gamma=doc.get("gamma", 0.6),
        total_timesteps=doc.get("total_timesteps", 200_000),
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_sets = load_datasets(cfg.manifest, cfg.train)
    eval_sets = load_datasets(cfg.manifest, cfg.eval)
    all_rows = []
    for seed in cfg.seeds:
        hyper = PpoHyper(gamma=cfg.gamma, total_timesteps=cfg.total_timesteps)
        env_cfg = EnvConfig(
            negative_reward=cfg.negative_reward, feature_mask=cfg.feature_mask
        )
        result = trainer.train(train_sets, hyper, seed=seed, env_cfg=env_cfg)
        policy.save_model(result.model, out_dir / f"model_seed{seed}.model")
        rows = evaluate_model(
            result.model,
            eval_sets,
            budget=cfg.budget,
            seeds=[seed],
            checkpoints=cfg.checkpoints,
            out_dir=out_dir,
            feature_mask=cfg.feature_mask,
        )
        for r in rows:
            r["train_seed"] = seed
        all_rows.extend(rows)
    with (out_dir / "bench.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["train_seed", "dataset", "method", "checkpoint", "mean", "stderr"])
        for r in all_rows:
            writer.writerow(
                [
                    r["train_seed"],
                    r["dataset"],
                    r["method"],
                    r["checkpoint"],
                    repr(r["mean"]),
                    repr(r["stderr"]),
                ]
            )
    print(f"wrote {out_dir / 'bench.csv'}")
    return 0


# ---------------------------------------------------------------------------
# ablations


def cmd_ablate(args) -> int:
    variants: list[tuple[str, dict]] = []
    if args.mode == "features":
        variants.append(("all_features", {}))
        for name, cols in FEATURE_GROUPS.items():
            variants.append((f"drop_{name}", {"feature_mask": cols}))
    elif args.mode == "reward":
        for val in (float(x) for x in args.values.split(",")):
            variants.append((f"neg_reward_{val}", {"negative_reward": val}))
    elif args.mode == "gamma":
        for val in (float(x) for x in args.values.split(",")):
            variants.append((f"gamma_{val}", {"gamma": val}))
    else:
        raise ConfigError(f"mode: unknown ablation mode {args.mode!r}")

    names_train = args.train.split(",")
    names_eval = args.eval.split(",")
    train_sets = load_datasets(args.manifest, names_train)
    eval_sets = load_datasets(args.manifest, names_eval)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    summary = []
    for name, overrides in variants:
        gamma = overrides.get("gamma", args.gamma)
        hyper = PpoHyper(gamma=gamma, total_timesteps=args.total_timesteps)
        env_cfg = EnvConfig(
            negative_reward=overrides.get("negative_reward", trainer.NEGATIVE_REWARD),
            feature_mask=overrides.get("feature_mask", ()),
        )
        result = trainer.train(train_sets, hyper, seed=args.seed, env_cfg=env_cfg)
        rows = evaluate_model(
            result.model,
            eval_sets,
            budget=args.budget,
            seeds=[args.seed],
            checkpoints=(args.budget,),
            feature_mask=overrides.get("feature_mask", ()),
        )
        for r in rows:
            if r["method"] == "policy":
                summary.append(
                    {"variant": name, "dataset": r["dataset"], "mean": r["mean"]}
                )
    with (out_dir / "ablation.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "dataset", f"discovered_at_{args.budget}"])
        for r in summary:
            writer.writerow([r["variant"], r["dataset"], repr(r["mean"])])
    print(f"wrote {out_dir / 'ablation.csv'} ({len(summary)} rows)")
    return 0


# ---------------------------------------------------------------------------
# serving


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(model_dir=args.model_dir, snapshot_dir=args.snapshot_dir)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anoquery", description="Active anomaly detection query engine"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic labeled datasets")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--dims", default="2,4,8")
    p.add_argument("--anomaly-frac", type=float, default=0.03)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a query policy")
    p.add_argument("--config", help="JSON config file (overrides other flags)")
    p.add_argument("--manifest")
    p.add_argument("--datasets", help="comma-separated dataset names (default: all)")
    p.add_argument("--model-out", dest="model_out")
    p.add_argument("--log-out", dest="log_out")
    p.add_argument("--seed", type=int)
    p.add_argument("--total-timesteps", type=int, default=200_000)
    p.add_argument("--gamma", type=float, default=0.6)
    p.add_argument("--negative-reward", type=float, default=trainer.NEGATIVE_REWARD)
    p.add_argument("--feature-mask", help="column list or group (detector/anomaly/normality)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained policy on labeled datasets")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--datasets")
    p.add_argument("--budget", type=int, default=engine.DEFAULT_BUDGET)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--seeds", help="comma-separated, one per run")
    p.add_argument("--checkpoints", default=",".join(str(c) for c in DEFAULT_CHECKPOINTS))
    p.add_argument("--feature-mask")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="train + evaluate from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True, help="base seed (recorded in config seeds)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="feature/reward/gamma ablation sweeps")
    p.add_argument("--mode", required=True, choices=("features", "reward", "gamma"))
    p.add_argument("--values", default="", help="comma-separated values for reward/gamma modes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--budget", type=int, default=engine.DEFAULT_BUDGET)
    p.add_argument("--gamma", type=float, default=0.6)
    p.add_argument("--total-timesteps", type=int, default=50_000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("serve", help="run the analyst session service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--model-dir", default=None)
    p.add_argument("--snapshot-dir", default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, policy.ModelFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
