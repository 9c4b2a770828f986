"""Command-line experiment harness.

Subcommands: world, train, generate, evaluate, angles, plot, sweep.

Every command is deterministic in the config's master seed; no file
carries a timestamp. ``metrics.csv`` columns, in order:
n, flip_ratio, cout_mean, l1_mean, l2_mean, feat_sim_mean, frechet,
split_frechet, mnac_mean, cd_mean. ``sweep.csv`` prepends gamma_deg,
lambda_c, lambda_d to the same columns.

Exit codes: 0 on success, 2 on invalid arguments or inputs, 1 on any
other failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import classifiers as cl
from . import engine as en
from . import guidance as gd
from . import metrics as mt
from . import plots
from . import world as wd
from .config import ExperimentConfig, config_to_json, load_config
from .errors import DegenerateInput, InvalidArgument, NumericalFailure
from .latent import AffineCodec, decode, encode, identity_codec, make_codec
from .schedule import NoiseSchedule, make_schedule, respace


@dataclass
class Harness:
    cfg: ExperimentConfig
    world: wd.MixtureWorld
    codec: AffineCodec
    schedule: NoiseSchedule
    guidance: gd.GuidanceConfig

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "Harness":
        world = wd.get_world(cfg.world)
        cs = cfg.codec
        if cs.latent_dim != world.latent_dim:
            raise InvalidArgument(f"codec latent_dim {cs.latent_dim} does not match world dimension {world.latent_dim}")
        codec = identity_codec(cs.latent_dim) if cs.identity else make_codec(cs.ambient_dim, cs.latent_dim, cs.seed)
        sc = cfg.schedule
        schedule = respace(make_schedule(sc.kind, sc.base_steps, sc.ddim_eta), sc.respace_factor)
        return cls(cfg, world, codec, schedule, cfg.guidance_config())

    def training_data(self, stream: int, n: int) -> tuple[np.ndarray, np.ndarray]:
        spec = self.cfg.classifier
        z, y = wd.sample(self.world, n, [spec.seed, stream])
        x = decode(self.codec, z)
        if stream == 0 and spec.train_noise > 0:
            x = x + spec.train_noise * np.random.default_rng([spec.seed, 2]).standard_normal(x.shape)
        return x, y

    def classifier(self) -> cl.Model:
        spec = self.cfg.classifier
        if spec.checkpoint:
            model = cl.load_model(spec.checkpoint)
            if model.in_dim != self.codec.ambient_dim:
                raise InvalidArgument("checkpoint input dimension does not match the codec")
            return model
        x, y = self.training_data(0, spec.n_train)
        mspec = cl.ModelSpec(spec.type, self.codec.ambient_dim, self.world.class_count, spec.hidden)
        return cl.train(mspec, x, y, spec.epochs, spec.lr, spec.batch, spec.seed)

    def factuals(self, n: int | None = None) -> np.ndarray:
        z, _ = wd.sample(self.world, n or self.cfg.n, [self.cfg.seed, 1])
        return decode(self.codec, z)

    def targets(self, factuals: np.ndarray, model: cl.Model) -> np.ndarray:
        t = self.cfg.target
        y_F = np.atleast_1d(cl.predict(model, factuals))
        return np.array([
            en.select_target_class(x, int(yf), self.world, model, self.codec, t.mode, t.k, [self.cfg.seed, 2, i], t.fixed_class)
            for i, (x, yf) in enumerate(zip(factuals, y_F))
        ])

    def run(self, model: cl.Model, guidance: gd.GuidanceConfig | None = None, threads: int | None = None):
        xf = self.factuals()
        return en.generate_batch(
            xf, self.targets(xf, model), self.world, self.codec, model, self.schedule,
            guidance or self.guidance, self.cfg.t_start_fraction, self.cfg.seed,
            self.cfg.record_trajectories, threads,
        )

    def evaluate(self, records, model: cl.Model) -> mt.MetricReport:
        z_ref, _ = wd.sample(self.world, len(records), [self.cfg.seed, 3])
        return mt.evaluate(records, model, self.world, self.codec, reference=decode(self.codec, z_ref))


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    if getattr(args, "preset", None) and args.command != "world":
        changes["guidance"] = args.preset
    return replace(cfg, **changes) if changes else cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# -- subcommands ---------------------------------------------------------------

def cmd_world(args) -> int:
    cfg = _load(args)
    name = args.preset or cfg.world
    world = wd.get_world(name)
    out = _out_dir(cfg)
    wd.save_world(world, out / "world.json")
    z, y = wd.sample(world, args.n, [cfg.seed, 0])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"z{j}" for j in range(world.latent_dim)] + ["label"])
    for row, label in zip(z, y):
        writer.writerow([repr(float(v)) for v in row] + [int(label)])
    (out / "dataset.csv").write_text(buf.getvalue())
    print(f"world {world.name}: {world.n_components} components, {world.class_count} classes, dim {world.latent_dim}")
    print(f"wrote {out / 'world.json'} and {out / 'dataset.csv'} ({args.n} rows)")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    h = Harness.from_config(cfg)
    out = _out_dir(cfg)
    model = h.classifier()
    x_tr, y_tr = h.training_data(0, cfg.classifier.n_train)
    x_te, y_te = h.training_data(1, cfg.classifier.n_train)
    bayes = np.argmax(wd.bayes_posteriors(h.world, encode(h.codec, x_te)), axis=1)
    cl.save_model(model, out / "classifier.json")
    summary = {
        "train_accuracy": cl.accuracy(model, x_tr, y_tr),
        "test_accuracy": cl.accuracy(model, x_te, y_te),
        "bayes_accuracy": float(np.mean(bayes == y_te)),
    }
    _dump(out / "train.json", summary)
    for k, v in summary.items():
        print(f"{k}: {v:.4f}")
    return 0


def _write_plots(h: Harness, out: Path, records, model) -> list[str]:
    if h.world.latent_dim != 2:
        (out / "plots_note.txt").write_text(
            f"world {h.world.name} has latent dimension {h.world.latent_dim}; plots are drawn for 2-D worlds only\n"
        )
        return ["plots_note.txt"]
    z, y = wd.sample(h.world, 600, [h.cfg.seed, 4])
    arrows = [(encode(h.codec, r.x_F), encode(h.codec, r.x_CF)) for r in records]
    trajs = [encode(h.codec, np.array([s.x0_hat for s in r.trajectory])) for r in records if r.trajectory]
    svg = plots.scatter_svg(
        z, y, lambda m: cl.predict(model, decode(h.codec, m)), arrows, trajs,
        title=f"{h.world.name}: factual to counterfactual",
    )
    (out / "scatter.svg").write_text(svg)
    curves = []
    for r in records:
        path = mt.perturbation_path(r.x_F, r.x_CF, r.x_F.size)
        p = cl.predict_proba(model, path)
        curves.append((p[:, r.y_CF], p[:, r.y_F]))
    (out / "cout_curves.svg").write_text(plots.curves_svg(curves, "insertion curves (target vs factual class)"))
    return ["scatter.svg", "cout_curves.svg"]


def cmd_generate(args) -> int:
    cfg = _load(args)
    if args.n is not None:
        cfg = replace(cfg, n=args.n)
    h = Harness.from_config(cfg)
    out = _out_dir(cfg)
    model = h.classifier()
    records = h.run(model)
    traj = out / "trajectories.jsonl" if cfg.record_trajectories else None
    en.write_records(out / "records.jsonl", records, traj)
    (out / "config.json").write_text(config_to_json(cfg))
    if cfg.emit_plots:
        _write_plots(h, out, records, model)
    fr = mt.flip_ratio(records, model)
    print(f"wrote {len(records)} records to {out / 'records.jsonl'} (flip ratio {fr:.3f})")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    h = Harness.from_config(cfg)
    out = _out_dir(cfg)
    path = Path(args.records) if args.records else out / "records.jsonl"
    records = en.read_records(path)
    if not records:
        raise InvalidArgument(f"no records in {path}")
    report = h.evaluate(records, h.classifier())
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "metrics.json").write_text(report.to_json())
    sys.stdout.write(report.to_csv())
    return 0


def collect_angle_pairs(h: Harness, model: cl.Model, threads: int | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Run generation and log (cls_score, eps_c - eps_uc) at every step of every episode."""
    xf = h.factuals()
    targets = h.targets(xf, model)
    cfg = h.cfg

    def episode(i):
        pairs = []

        def log(t, info):
            if info["cls"] is not None:
                pairs.append((info["cls"].copy(), info["implicit"].copy()))

        en.generate(xf[i], int(targets[i]), h.world, h.codec, model, h.schedule, h.guidance,
                    cfg.t_start_fraction, en.derive_seed(cfg.seed, i), record_id=i, on_step=log)
        return pairs

    n_workers = threads or en.worker_count()
    if n_workers <= 1:
        chunks = [episode(i) for i in range(len(xf))]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            chunks = list(pool.map(episode, range(len(xf))))
    return [p for chunk in chunks for p in chunk]


def cmd_angles(args) -> int:
    cfg = _load(args)
    h = Harness.from_config(cfg)
    if h.guidance.mode == "uncond-only":
        raise InvalidArgument("angle logging needs a guided mode; uncond-only computes no classifier score")
    out = _out_dir(cfg)
    pairs = collect_angle_pairs(h, h.classifier())
    stats = gd.angle_stats(pairs, args.threshold)
    summary = stats.summary()
    _dump(out / "angles.json", summary)
    if cfg.emit_plots:
        (out / "angles.svg").write_text(
            plots.histogram_svg(stats.edges, stats.counts, "angle between classifier score and implicit classifier", args.threshold)
        )
    print(f"pairs {summary['n_pairs']} (degenerate {summary['degenerate']}), "
          f"fraction above {args.threshold:g} deg: {summary['fraction_above']:.4f}")
    return 0


def cmd_plot(args) -> int:
    cfg = _load(args)
    h = Harness.from_config(cfg)
    out = _out_dir(cfg)
    rec_path = Path(args.records) if args.records else out / "records.jsonl"
    records = en.read_records(rec_path)
    if not records:
        raise InvalidArgument(f"no records in {rec_path}")
    traj_path = Path(args.trajectories) if args.trajectories else rec_path.with_name("trajectories.jsonl")
    if traj_path.exists():
        trajs = en.read_trajectories(traj_path)
        for r in records:
            r.trajectory = trajs.get(r.record_id)
    written = _write_plots(h, out, records, h.classifier())
    angles = rec_path.with_name("angles.json")
    if angles.exists():
        s = json.loads(angles.read_text())
        (out / "angles.svg").write_text(plots.histogram_svg(s["bin_edges_deg"], s["counts"], "angle histogram", s["threshold_deg"]))
        written.append("angles.svg")
    print("wrote " + ", ".join(written))
    return 0


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise InvalidArgument(f"expected a comma-separated list of numbers, got {text!r}") from exc


def cmd_sweep(args) -> int:
    cfg = _load(args)
    h = Harness.from_config(cfg)
    out = _out_dir(cfg)
    model = h.classifier()
    base = h.guidance
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("gamma_deg", "lambda_c", "lambda_d") + mt.CSV_COLUMNS)
    for g in _floats(args.gammas) or [base.gamma_deg]:
        for lc in _floats(args.lambda_c) or [base.lambda_c]:
            for ld in _floats(args.lambda_d) or [base.lambda_d]:
                gcfg = replace(base, gamma_deg=g, lambda_c=lc, lambda_d=ld)
                report = h.evaluate(h.run(model, gcfg), model)
                writer.writerow([repr(g), repr(lc), repr(ld)] + [repr(getattr(report, c)) for c in mt.CSV_COLUMNS])
                print(f"gamma {g:g} lambda_c {lc:g} lambda_d {ld:g}: flip ratio {report.flip_ratio:.3f}")
    (out / "sweep.csv").write_text(buf.getvalue())
    return 0


COMMANDS = {
    "world": cmd_world,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "angles": cmd_angles,
    "plot": cmd_plot,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfdiff", description="Counterfactual generation on synthetic mixture worlds.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--preset", help="world preset for 'world', guidance preset otherwise")
        if name == "world":
            p.add_argument("--n", type=int, default=1000, help="dataset size")
        if name == "generate":
            p.add_argument("--n", type=int, help="number of factuals (overrides config)")
        if name in ("evaluate", "plot"):
            p.add_argument("--records", help="records JSONL (default: <out>/records.jsonl)")
        if name == "plot":
            p.add_argument("--trajectories", help="trajectory JSONL (default: next to records)")
        if name == "angles":
            p.add_argument("--threshold", type=float, default=60.0)
        if name == "sweep":
            p.add_argument("--gammas", default="", help="comma-separated gamma values in degrees")
            p.add_argument("--lambda-c", default="", help="comma-separated lambda_c values")
            p.add_argument("--lambda-d", default="", help="comma-separated lambda_d values")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (InvalidArgument, DegenerateInput) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalFailure, OSError, KeyError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
