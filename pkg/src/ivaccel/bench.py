"""Seeded separation experiments with per-iteration convergence traces.

One experiment fixes a synthetic scene, an STFT configuration and an
optimization scheme, then repeats: generate sources and room responses from
``seed_base + repetition``, mix at the configured SNR, run the optimizer,
and after every ``eval_every`` iterations resynthesize the outputs and
score them against the clean sources. Each repetition is written as one CSV
(schema below) plus an aggregated mean-over-repetitions file; wall-clock
covers the optimizer step only, never the evaluation.

CSV schema::

    rep,iter,mm_evals,wall_clock_s,cost_J,out_idx,sdr_db,sir_db,sar_db,perm

where the sdr/sir/sar columns are improvements over scoring the unprocessed
microphone signals and ``perm`` is the chosen output-to-source assignment.
Experiments are reproducible: everything except the wall-clock column is a
pure function of the configuration.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .accel import AccelConfig, run
from .evaluation import EvalConfig, SeparationScorer
from .scenes import SceneConfig, _TAG_NOISE, mix, synth_rir, synth_sources
from .separation import cost, demix, laplacian_model, project_back
from .spectral import StftConfig, TimeSignal, analyze, synthesize

__all__ = [
    "TRACE_HEADER",
    "ExperimentConfig",
    "load_config",
    "run_experiment",
    "compare",
    "main",
]

TRACE_HEADER = "rep,iter,mm_evals,wall_clock_s,cost_J,out_idx,sdr_db,sir_db,sar_db,perm"
MEAN_HEADER = "iter,mm_evals,wall_clock_s,cost_J,out_idx,sdr_db,sir_db,sar_db"


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one experiment: scene, transform, algorithm, loop."""

    scene: SceneConfig = SceneConfig()
    stft: StftConfig = StftConfig()
    algorithm: AccelConfig = AccelConfig()
    iterations: int = 30
    repetitions: int = 20
    eval_every: int = 1
    seed_base: int = 0
    output: str = "runs/experiment"
    eval_filter_length: int = 512
    source_kind: str = "laplacian"
    speech_paths: tuple = ()

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


def _parse_section(parser, section, fields, types):
    out = {}
    if not parser.has_section(section):
        return out
    for key, raw in parser.items(section):
        if key not in fields:
            raise ValueError(f"unknown config key [{section}] {key}")
        out[key] = types[key](raw)
    return out


def load_config(path) -> ExperimentConfig:
    """Load an experiment configuration from a flat INI-style file.

    Sections ``[scene]``, ``[stft]``, ``[algorithm]`` and ``[experiment]``
    mirror the corresponding dataclass fields; missing keys keep their
    defaults and unknown keys are rejected.
    """
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ValueError(f"cannot read config file {path!r}")

    scene_types = {
        "n_channels": int,
        "t60": float,
        "rir_length": int,
        "snr_db": float,
        "sample_rate": int,
        "duration": float,
        "drr_db": float,
        "seed": int,
    }
    stft_types = {"window_length": int, "hop": int, "window_kind": str}
    algo_types = {
        "scheme": str,
        "mu": float,
        "q": int,
        "safeguard": str,
        "epsilon_fp": float,
        "squarem_form": str,
        "squarem_alpha": str,
        "qn_exact_secants": lambda s: s.strip().lower() in ("1", "true", "yes"),
    }
    exp_types = {
        "iterations": int,
        "repetitions": int,
        "eval_every": int,
        "seed_base": int,
        "output": str,
        "eval_filter_length": int,
        "source_kind": str,
        "speech_paths": lambda s: tuple(p.strip() for p in s.split(",") if p.strip()),
    }

    scene = SceneConfig(**_parse_section(parser, "scene", scene_types, scene_types))
    stft = StftConfig(**_parse_section(parser, "stft", stft_types, stft_types))
    algo = AccelConfig(**_parse_section(parser, "algorithm", algo_types, algo_types))
    exp = _parse_section(parser, "experiment", exp_types, exp_types)
    return ExperimentConfig(scene=scene, stft=stft, algorithm=algo, **exp)


def _format_row(values) -> str:
    return ",".join(values)


def _f(x: float) -> str:
    return repr(float(x))


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_repetition(config: ExperimentConfig, rep: int) -> list[dict]:
    """Run one seeded repetition and return its trace rows."""
    seed = config.seed_base + rep
    scene = replace(config.scene, seed=seed)
    model = laplacian_model()

    sources = synth_sources(
        scene.n_channels,
        scene.duration,
        kind=config.source_kind,
        seed=seed,
        sample_rate=scene.sample_rate,
        speech_paths=config.speech_paths or None,
    )
    system = synth_rir(scene)
    mics = mix(sources, system, scene.snr_db, rng=np.random.default_rng([seed, _TAG_NOISE]))
    x_spec = analyze(mics, config.stft)

    # Resynthesis covers (T-1) * hop + window samples; score on that region.
    n_cov = (x_spec.n_frames - 1) * config.stft.hop + config.stft.window_length
    refs = sources.samples[:, :n_cov]
    scorer = SeparationScorer(refs, EvalConfig(filter_length=config.eval_filter_length))
    baseline = scorer.score(mics.samples[:, :n_cov])

    rows: list[dict] = []

    def observer(iteration, mm_evals, elapsed_s, demixer):
        if iteration % config.eval_every != 0 and iteration != config.iterations:
            return
        y = project_back(demix(demixer, x_spec), x_spec)
        estimates = synthesize(y).samples
        card = scorer.score(estimates)
        imp = card.improvement_over(baseline)
        j_val = cost(demixer, x_spec, model)
        perm = "-".join(str(p) for p in card.permutation)
        for k in range(scene.n_channels):
            rows.append(
                {
                    "rep": rep,
                    "iter": iteration,
                    "mm_evals": mm_evals,
                    "wall_clock_s": elapsed_s,
                    "cost_J": j_val,
                    "out_idx": k,
                    "sdr_db": float(imp.sdr_db[k]),
                    "sir_db": float(imp.sir_db[k]),
                    "sar_db": float(imp.sar_db[k]),
                    "perm": perm,
                }
            )

    run(x_spec, model, config.algorithm, config.iterations, observer=observer)
    return rows


def _failure_row(rep: int, message: str) -> dict:
    safe = message.replace(",", ";").replace("\n", " ")
    return {
        "rep": rep,
        "iter": -1,
        "mm_evals": 0,
        "wall_clock_s": 0.0,
        "cost_J": math.nan,
        "out_idx": -1,
        "sdr_db": math.nan,
        "sir_db": math.nan,
        "sar_db": math.nan,
        "perm": f"failed:{safe}",
    }


def _trace_csv(rows: list[dict]) -> str:
    lines = [TRACE_HEADER]
    for r in rows:
        lines.append(
            _format_row(
                [
                    str(r["rep"]),
                    str(r["iter"]),
                    str(r["mm_evals"]),
                    _f(r["wall_clock_s"]),
                    _f(r["cost_J"]),
                    str(r["out_idx"]),
                    _f(r["sdr_db"]),
                    _f(r["sir_db"]),
                    _f(r["sar_db"]),
                    r["perm"],
                ]
            )
        )
    return "\n".join(lines) + "\n"


def _mean_csv(per_rep: list[list[dict]]) -> str:
    groups: dict[tuple, list[dict]] = {}
    for rows in per_rep:
        for r in rows:
            if r["iter"] < 0:
                continue
            groups.setdefault((r["iter"], r["out_idx"]), []).append(r)
    lines = [MEAN_HEADER]
    for (iteration, out_idx) in sorted(groups):
        members = groups[(iteration, out_idx)]
        evals = {m["mm_evals"] for m in members}
        if len(evals) != 1:
            raise AssertionError("map-evaluation accounting differs across repetitions")
        lines.append(
            _format_row(
                [
                    str(iteration),
                    str(evals.pop()),
                    _f(np.mean([m["wall_clock_s"] for m in members])),
                    _f(np.mean([m["cost_J"] for m in members])),
                    str(out_idx),
                    _f(np.mean([m["sdr_db"] for m in members])),
                    _f(np.mean([m["sir_db"] for m in members])),
                    _f(np.mean([m["sar_db"] for m in members])),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def _meta_dict(config: ExperimentConfig) -> dict:
    scene = dataclasses.asdict(config.scene)
    if scene["direct_delay"] is not None:
        scene["direct_delay"] = np.asarray(scene["direct_delay"]).tolist()
    return {
        "scene": scene,
        "stft": dataclasses.asdict(config.stft),
        "algorithm": dataclasses.asdict(config.algorithm),
        "iterations": config.iterations,
        "repetitions": config.repetitions,
        "eval_every": config.eval_every,
        "seed_base": config.seed_base,
        "eval_filter_length": config.eval_filter_length,
        "source_kind": config.source_kind,
        "speech_paths": list(config.speech_paths),
    }


def run_experiment(config: ExperimentConfig) -> Path:
    """Run all repetitions, write trace CSVs and metadata, return the directory."""
    out_dir = Path(config.output)
    per_rep: list[list[dict]] = []
    for rep in range(config.repetitions):
        try:
            rows = run_repetition(config, rep)
        except Exception as err:  # recorded, repetition aborted
            rows = [_failure_row(rep, f"{type(err).__name__}: {err}")]
        per_rep.append(rows)
        _atomic_write(out_dir / f"rep_{rep:03d}.csv", _trace_csv(rows))
    _atomic_write(out_dir / "mean.csv", _mean_csv(per_rep))
    _atomic_write(out_dir / "meta.json", json.dumps(_meta_dict(config), indent=2) + "\n")
    return out_dir


def _load_mean(path: Path) -> list[dict]:
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        rows = []
        for r in reader:
            rows.append(
                {
                    "iter": int(r["iter"]),
                    "mm_evals": int(r["mm_evals"]),
                    "wall_clock_s": float(r["wall_clock_s"]),
                    "cost_J": float(r["cost_J"]),
                    "out_idx": int(r["out_idx"]),
                    "sdr_db": float(r["sdr_db"]),
                    "sir_db": float(r["sir_db"]),
                    "sar_db": float(r["sar_db"]),
                }
            )
    return rows


def _algorithm_label(meta: dict) -> str:
    algo = meta["algorithm"]
    scheme = algo["scheme"]
    if scheme == "gradient":
        return f"gradient(mu={algo['mu']})"
    if scheme == "quasi_newton":
        return f"quasi_newton(q={algo['q']})"
    return scheme


def _mean_sir_curve(rows: list[dict]):
    """Mean-over-outputs SIR improvement per iteration: (iters, evals, wall, sir)."""
    by_iter: dict[int, list[dict]] = {}
    for r in rows:
        by_iter.setdefault(r["iter"], []).append(r)
    iters = sorted(by_iter)
    evals = [by_iter[i][0]["mm_evals"] for i in iters]
    wall = [by_iter[i][0]["wall_clock_s"] for i in iters]
    sir = [float(np.mean([m["sir_db"] for m in by_iter[i]])) for i in iters]
    return iters, evals, wall, sir


def evals_to_fraction(rows: list[dict], fraction: float = 0.9):
    """Map evaluations and wall-clock needed to reach a fraction of the final
    mean SIR improvement; returns (evals, wall_clock_s, threshold_db)."""
    iters, evals, wall, sir = _mean_sir_curve(rows)
    final = sir[-1]
    threshold = fraction * final
    for idx in range(len(iters)):
        if sir[idx] >= threshold:
            return evals[idx], wall[idx], threshold
    return evals[-1], wall[-1], threshold


def compare(trace_dirs, fraction: float = 0.9) -> list[dict]:
    """Summarize experiments over the same scene into one table.

    Each directory must come from :func:`run_experiment`. Raises if the
    underlying scenes, seeds or repetition counts differ. Rows are sorted by
    algorithm label; the map-evaluation ratio column is taken against the
    plain sweep when present, otherwise against the first label.
    """
    dirs = [Path(d) for d in trace_dirs]
    if len(dirs) < 2:
        raise ValueError("compare needs at least two trace directories")
    metas, means = [], []
    for d in dirs:
        with open(d / "meta.json") as handle:
            metas.append(json.load(handle))
        means.append(_load_mean(d / "mean.csv"))

    comparable_keys = ("scene", "stft", "seed_base", "repetitions", "eval_every", "source_kind")
    reference = {k: metas[0][k] for k in comparable_keys}
    for meta in metas[1:]:
        if {k: meta[k] for k in comparable_keys} != reference:
            raise ValueError("traces not comparable: scene or seed configuration differs")

    entries = []
    for meta, rows in zip(metas, means):
        label = _algorithm_label(meta)
        iters, evals, wall, sir = _mean_sir_curve(rows)
        by_final = [r for r in rows if r["iter"] == iters[-1]]
        e90, w90, _ = evals_to_fraction(rows, fraction)
        entries.append(
            {
                "algorithm": label,
                "final_sdr_db": float(np.mean([r["sdr_db"] for r in by_final])),
                "final_sir_db": float(np.mean([r["sir_db"] for r in by_final])),
                "evals_to_90pct_sir": e90,
                "seconds_to_90pct_sir": w90,
                "mean_iter_s": wall[-1] / iters[-1],
            }
        )
    entries.sort(key=lambda e: e["algorithm"])
    base = next(
        (e for e in entries if e["algorithm"] == "plain_mm"), entries[0]
    )
    for e in entries:
        e["evals_ratio_vs_baseline"] = e["evals_to_90pct_sir"] / base["evals_to_90pct_sir"]
    return entries


def _summary_text(entries: list[dict]) -> str:
    cols = [
        "algorithm",
        "final_sdr_db",
        "final_sir_db",
        "evals_to_90pct_sir",
        "seconds_to_90pct_sir",
        "mean_iter_s",
        "evals_ratio_vs_baseline",
    ]
    out = io.StringIO()
    out.write(",".join(cols) + "\n")
    for e in entries:
        cells = []
        for c in cols:
            v = e[c]
            cells.append(v if isinstance(v, str) else _f(v) if isinstance(v, float) else str(v))
        out.write(",".join(cells) + "\n")
    return out.getvalue()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ivaccel-bench",
        description="Run and compare seeded source-separation convergence experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment and write trace CSVs")
    run_p.add_argument("config", nargs="?", help="INI config file (defaults used if omitted)")
    run_p.add_argument("--scheme", help="optimization scheme override")
    run_p.add_argument("--mu", type=float, help="gradient step size override")
    run_p.add_argument("--iterations", type=int, help="iteration count override")
    run_p.add_argument("--seed-base", type=int, help="base seed override")
    run_p.add_argument("--reps", type=int, help="repetition count override")
    run_p.add_argument("--out", help="output directory override")
    run_p.add_argument("--eval-every", type=int, help="evaluate every Nth iteration")

    cmp_p = sub.add_parser("compare", help="summarize experiments over the same scene")
    cmp_p.add_argument("dirs", nargs="+", help="trace directories from 'run'")
    cmp_p.add_argument("--out", help="write the summary CSV here as well")

    args = parser.parse_args(argv)

    if args.command == "run":
        config = load_config(args.config) if args.config else ExperimentConfig()
        algo = config.algorithm
        if args.scheme is not None:
            algo = replace(algo, scheme=args.scheme)
        if args.mu is not None:
            algo = replace(algo, mu=args.mu)
        config = replace(config, algorithm=algo)
        if args.iterations is not None:
            config = replace(config, iterations=args.iterations)
        if args.seed_base is not None:
            config = replace(config, seed_base=args.seed_base)
        if args.reps is not None:
            config = replace(config, repetitions=args.reps)
        if args.out is not None:
            config = replace(config, output=args.out)
        if args.eval_every is not None:
            config = replace(config, eval_every=args.eval_every)
        out_dir = run_experiment(config)
        print(f"wrote traces to {out_dir}")
        return 0

    entries = compare(args.dirs)
    text = _summary_text(entries)
    print(text, end="")
    if args.out:
        _atomic_write(Path(args.out), text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
