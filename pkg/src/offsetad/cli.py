"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing or malformed input), 3 numeric failure.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import artifacts
from .config import ConfigError, resolve
from .norm_as import generate_pseudo_anomaly, generate_random_direction_anomaly
from .offset_net import VARIANTS, NumericError, TrainConfig, parse_checkpoint, serialize_checkpoint, serialize_history, train
from .pointcloud import PointCloudError, ensure_normals, load_cloud, normalize, serialize_ply, serialize_score_csv
from .scoring import FeatureOptions, evaluate, mean_rank, patch_sweep, robustness_sweep, score_instance
from .synth import SHAPES, build_benchmark

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

# flag name -> (section, key); None section means top level
_FLAG_MAP = {
    "seed": (None, "seed"),
    "out": (None, "output_dir"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "lr0"),
    "replication": ("train", "replication"),
    "patches": ("train", "patches"),
    "voxel_size": ("train", "voxel_size"),
    "variant": ("train", "variant"),
    "hidden": ("train", "hidden"),
    "k": ("train", "k"),
    "shape": ("bench", "kind"),
    "points": ("bench", "n_points"),
    "train_count": ("bench", "train_count"),
    "test_count": ("bench", "test_count"),
    "anomaly_fraction": ("bench", "anomaly_fraction"),
    "test_seed": ("bench", "test_seed"),
}


def _overrides(flags: dict) -> dict:
    out: dict = {}
    for name, value in flags.items():
        if value is None or name not in _FLAG_MAP:
            continue
        section, key = _FLAG_MAP[name]
        if section is None:
            out[key] = value
        else:
            out.setdefault(section, {})[key] = value
    lo, hi = flags.get("beta_min"), flags.get("beta_max")
    if lo is not None or hi is not None:
        out.setdefault("train", {})["_beta"] = (lo, hi)
    return out


def _load_config(flags: dict):
    over = _overrides(flags)
    beta = over.get("train", {}).pop("_beta", None)
    cfg = resolve(flags.get("config"), flags.get("preset"), over)
    if beta is not None:
        lo, hi = beta
        cur = cfg.train_config().beta_range
        over.setdefault("train", {})["beta_range"] = [cur[0] if lo is None else lo, cur[1] if hi is None else hi]
        cfg = resolve(flags.get("config"), flags.get("preset"), over)
    return cfg


def common_options(fn):
    opts = [
        click.option("--config", type=click.Path(dir_okay=False), help="YAML run configuration."),
        click.option("--preset", type=click.Choice(["reference", "desk"]), help="Preset applied before the config file."),
        click.option("--seed", type=int, help="Master seed."),
        click.option("--out", type=str, help="Output directory."),
        click.option("--epochs", type=int),
        click.option("--batch-size", type=int),
        click.option("--lr", type=float, help="Initial learning rate."),
        click.option("--replication", type=int),
        click.option("--patches", type=int, help="Patch count J."),
        click.option("--beta-min", type=float),
        click.option("--beta-max", type=float),
        click.option("--voxel-size", type=float),
        click.option("--variant", type=click.Choice(VARIANTS)),
        click.option("--hidden", type=int),
        click.option("--k", type=int, help="Base neighbourhood size for features."),
        click.option("--shape", type=click.Choice(SHAPES), help="Synthetic category."),
        click.option("--points", type=int),
        click.option("--train-count", type=int),
        click.option("--test-count", type=int),
        click.option("--anomaly-fraction", type=float),
        click.option("--test-seed", type=int),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _echo(msg):
    click.echo(msg, err=True)


def _progress(every=10):
    def report(epoch, loss):
        if epoch % every == 0:
            _echo(f"epoch {epoch}: l_dist={loss.l_dist:.5f} l_dir={loss.l_dir:.5f} l_off={loss.l_off:.5f}")

    return report


def _train_and_test(cfg, data):
    cat = cfg.category()
    if data:
        train_clouds = [ensure_normals(c) for c in artifacts.load_train_dir(data, cat.name)]
        test, labels = artifacts.load_test_dir(data, cat.name)
        return train_clouds, test, labels
    bench = build_benchmark(cat)
    return bench.train, bench.test, bench.labels


def _load_model(path):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"model checkpoint not found: {p}")
    return parse_checkpoint(p.read_bytes())


def _fmt(x):
    return f"{x:.4f}"


@click.group()
def cli():
    """Offset-based point cloud anomaly detection."""


@cli.command()
@common_options
def bench(**flags):
    """Write a synthetic benchmark directory."""
    cfg = _load_config(flags)
    out = Path(cfg.output_dir)
    b = build_benchmark(cfg.category())
    artifacts.save_benchmark(b, out)
    artifacts.write_manifest(out, "bench", cfg.to_dict())
    _echo(f"wrote {len(b.train)} train and {len(b.test)} test clouds to {out}")


@cli.command()
@click.argument("input_file", type=click.Path())
@click.option("--random-direction", is_flag=True, help="Move the patch along one random direction.")
@common_options
def augment(input_file, random_direction, **flags):
    """Inject one pseudo-anomaly into INPUT_FILE."""
    cfg = _load_config(flags)
    tc = cfg.train_config()
    cloud = normalize(ensure_normals(load_cloud(input_file)))
    gen = generate_random_direction_anomaly if random_direction else generate_pseudo_anomaly
    sample = gen(cloud, tc.patches, tc.beta_range, np.random.default_rng([cfg.seed, 30]))
    out = Path(cfg.output_dir)
    artifacts.write_atomic(out / "augmented.ply", serialize_ply(sample.cloud))
    artifacts.write_atomic(out / "offsets.csv", artifacts.offsets_csv(sample.gt_offsets))
    artifacts.write_atomic(out / "mask.csv", artifacts.mask_csv(sample.anomaly_mask))
    d = sample.draw
    artifacts.write_manifest(
        out,
        "augment",
        cfg.to_dict(),
        {"input": str(input_file), "random_direction": bool(random_direction),
         "draw": {"patch_id": d.patch_id, "alpha": d.alpha, "beta": d.beta}},
    )
    _echo(f"patch {d.patch_id}, alpha {d.alpha:+d}, beta {d.beta:.4f}; {int(sample.anomaly_mask.sum())} points moved")


@cli.command("train")
@click.option("--data", type=click.Path(), help="Benchmark directory; synthetic if omitted.")
@common_options
def train_cmd(data, **flags):
    """Train an offset predictor."""
    cfg = _load_config(flags)
    tc = cfg.train_config()
    train_clouds, _, _ = _train_and_test(cfg, data)
    result = train(train_clouds, tc, _progress())
    out = Path(cfg.output_dir)
    artifacts.write_atomic(out / "model.ckpt", serialize_checkpoint(result.net))
    artifacts.write_atomic(out / "loss_history.csv", serialize_history(result.history))
    artifacts.write_manifest(out, "train", cfg.to_dict(), {"data": data})
    _echo(f"model written to {out / 'model.ckpt'}")


@cli.command()
@click.argument("input_file", type=click.Path())
@click.option("--model", required=True, type=click.Path())
@common_options
def score(input_file, model, **flags):
    """Per-point heatmap (PLY with anomaly_score, plus CSV) for one cloud."""
    cfg = _load_config(flags)
    net = _load_model(model)
    cloud = normalize(ensure_normals(load_cloud(input_file)))
    scored = score_instance(net, cloud, FeatureOptions.from_train(cfg.train_config()))
    out = Path(cfg.output_dir)
    stem = Path(input_file).stem
    artifacts.write_atomic(out / f"{stem}_scores.ply", serialize_ply(cloud, scored.point_scores))
    artifacts.write_atomic(out / f"{stem}_scores.csv", serialize_score_csv(cloud, scored.point_scores))
    artifacts.write_manifest(out, "score", cfg.to_dict(), {"input": str(input_file), "model": str(model)})
    click.echo(f"object_score {scored.object_score!r}")


@cli.command("eval")
@click.option("--model", required=True, type=click.Path())
@click.option("--data", type=click.Path(), help="Benchmark directory; synthetic if omitted.")
@click.option("--per-instance-point-auc", is_flag=True, help="Average point AUC per anomalous instance instead of pooling.")
@common_options
def eval_cmd(model, data, per_instance_point_auc, **flags):
    """Object/point AUC-ROC and object AUC-PR on a test set."""
    cfg = _load_config(flags)
    net = _load_model(model)
    eo = cfg.eval_options()
    pooled = eo.pooled_point_auc and not per_instance_point_auc
    _, test, labels = _train_and_test(cfg, data)
    rep = evaluate(net, test, labels, FeatureOptions.from_train(cfg.train_config()), cfg.category().name, pooled)
    out = Path(cfg.output_dir)
    header = ["category", "object_auc_roc", "point_auc_roc", "object_auc_pr", "mean_rank"]
    rows = [(n, o, p, pr, rep.mean_rank) for n, o, p, pr in rep.rows()]
    artifacts.write_atomic(out / "report.csv", artifacts.csv_bytes(header, rows))
    summary = (
        f"object AUC-ROC {_fmt(rep.object_auc_roc)}\n"
        f"point AUC-ROC  {_fmt(rep.point_auc_roc)} ({'pooled' if pooled else 'per-instance mean'})\n"
        f"object AUC-PR  {_fmt(rep.object_auc_pr)}\n"
        f"test instances {len(test)}\n"
    )
    artifacts.write_text(out / "summary.txt", summary)
    artifacts.write_manifest(out, "eval", cfg.to_dict(), {"model": str(model), "data": data})
    click.echo(summary, nl=False)


@cli.command("sweep-noise")
@click.option("--model", required=True, type=click.Path())
@click.option("--data", type=click.Path(), help="Benchmark directory; synthetic if omitted.")
@common_options
def sweep_noise(model, data, **flags):
    """Re-evaluate under Gaussian noise of each configured sigma."""
    cfg = _load_config(flags)
    net = _load_model(model)
    eo = cfg.eval_options()
    _, test, labels = _train_and_test(cfg, data)
    rows = robustness_sweep(net, test, labels, eo.sigmas, cfg.seed,
                            FeatureOptions.from_train(cfg.train_config()), eo.pooled_point_auc)
    out = Path(cfg.output_dir)
    artifacts.write_atomic(
        out / "robustness.csv",
        artifacts.csv_bytes(["sigma", "object_auc_roc", "point_auc_roc"],
                            [(r["sigma"], r["object_auc_roc"], r["point_auc_roc"]) for r in rows]),
    )
    artifacts.write_manifest(out, "sweep-noise", cfg.to_dict(), {"model": str(model), "data": data})
    for r in rows:
        click.echo(f"sigma {r['sigma']:<6} object {_fmt(r['object_auc_roc'])} point {_fmt(r['point_auc_roc'])}")


@cli.command("sweep-patches")
@click.option("--data", type=click.Path(), help="Benchmark directory; synthetic if omitted.")
@common_options
def sweep_patches(data, **flags):
    """Train and evaluate one model per patch count."""
    cfg = _load_config(flags)
    eo = cfg.eval_options()
    train_clouds, test, labels = _train_and_test(cfg, data)
    rows = patch_sweep(train_clouds, test, labels, eo.patch_values, cfg.train_config())
    out = Path(cfg.output_dir)
    artifacts.write_atomic(
        out / "patches.csv",
        artifacts.csv_bytes(["J", "object_auc_roc", "point_auc_roc"],
                            [(r["J"], r["object_auc_roc"], r["point_auc_roc"]) for r in rows]),
    )
    artifacts.write_manifest(out, "sweep-patches", cfg.to_dict(), {"data": data})
    for r in rows:
        click.echo(f"J {r['J']:<4} object {_fmt(r['object_auc_roc'])} point {_fmt(r['point_auc_roc'])}")


ABLATION_ROWS = (
    # name, loss terms, displacement along normals
    ("full", "dist+dir", True),
    ("dist_only", "dist", True),
    ("dir_only", "dir", True),
    ("random_direction", "dist+dir", False),
)


def run_ablation(train_clouds, test, labels, base: TrainConfig, seeds, pooled=True):
    """Median object/point AUC-ROC per variant over `seeds`.

    Returns rows (variant, losses, normals, object_auc, point_auc, mean_rank)
    where the mean rank is taken over the two metric columns.
    """
    results = {}
    for variant, _, _ in ABLATION_ROWS:
        objs, pts = [], []
        for s in seeds:
            tc = TrainConfig(**{**base.__dict__, "variant": variant, "seed": int(s)})
            net = train(train_clouds, tc).net
            rep = evaluate(net, test, labels, FeatureOptions.from_train(tc), pooled=pooled)
            objs.append(rep.object_auc_roc)
            pts.append(rep.point_auc_roc)
        results[variant] = (float(np.median(objs)), float(np.median(pts)))
    table = np.array([results[v] for v, _, _ in ABLATION_ROWS])
    ranks = mean_rank(table)
    return [
        (v, losses, normals, results[v][0], results[v][1], float(r))
        for (v, losses, normals), r in zip(ABLATION_ROWS, ranks)
    ]


@cli.command()
@click.option("--data", type=click.Path(), help="Benchmark directory; synthetic if omitted.")
@common_options
def ablate(data, **flags):
    """Compare the full objective against its three variants."""
    cfg = _load_config(flags)
    eo = cfg.eval_options()
    train_clouds, test, labels = _train_and_test(cfg, data)
    rows = run_ablation(train_clouds, test, labels, cfg.train_config(), eo.ablate_seeds, eo.pooled_point_auc)
    out = Path(cfg.output_dir)
    artifacts.write_atomic(
        out / "ablation.csv",
        artifacts.csv_bytes(["variant", "losses", "normal_vectors", "object_auc_roc", "point_auc_roc", "mean_rank"],
                            [(v, l, int(n), o, p, r) for v, l, n, o, p, r in rows]),
    )
    artifacts.write_manifest(out, "ablate", cfg.to_dict(), {"data": data})
    for v, l, n, o, p, r in rows:
        click.echo(f"{v:<17} object {_fmt(o)} point {_fmt(p)} mean rank {r:.2f}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="offsetad", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        _echo("aborted")
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except ConfigError as exc:
        _echo(f"error: {exc}")
        return EXIT_USAGE
    except NumericError as exc:
        _echo(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError, PointCloudError, ValueError, UnicodeDecodeError) as exc:
        _echo(f"data error: {exc}")
        return EXIT_DATA
    return 0


def entry():
    sys.exit(main())
