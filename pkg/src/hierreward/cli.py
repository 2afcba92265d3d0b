"""Command-line pipeline: calibrate, select, train, evaluate, report.

Output layout under ``output_dir``::

    config.yaml                 copy of the config file, byte for byte
    manifest.json               config hash, artifact paths, per-stage status
    reference.json              superior-area cut-off q* and its reference sample summary
    seed_<s>/calibration.json   normalization stats and gate threshold
    seed_<s>/selection.json     selection report
    seed_<s>/<method>/          checkpoints, trajectories.jsonl, history.json, run.json, eval.jsonl
    seed_<s>/judge/<a>__<b>.jsonl
    report/                     matrix.json, one CSV per metric, summary.csv

Every artifact except the manifest is a pure function of the config, so
rerunning a command rewrites identical bytes.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import filelock

from . import __version__, seeding
from .config import JudgeMode, LoadedConfig, RunConfig, load_config, with_overrides
from .environment import (
    AspectSpec,
    aspect_reward,
    holistic_reward,
    quality,
    signal_statistic,
    superior_threshold,
)
from .errors import ConfigError, DegenerateDataError, HierRewardError
from .evaluation import (
    EvalRecord,
    JudgeClient,
    JudgeRequest,
    JudgeVerdict,
    MethodMatrix,
    account,
    build_matrix,
    judge_pairs,
    render_tokens,
    simulated_judge_fn,
)
from .reward_core import (
    HierarchicalRewardConfig,
    NormalizationStats,
    fit_normalization,
    quantile_threshold,
    z_normalize,
)
from .selection import ComparisonPair, SelectionReport, select_rewards
from .trainer import (
    DecodeMode,
    Method,
    PolicyParams,
    eval_prompt_ids,
    generate_batch,
    initial_policy,
    load_checkpoint,
    sample_prompts,
    train,
)

logger = logging.getLogger("hierreward")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_DEGENERATE = 3

MANIFEST = "manifest.json"
LOCK = ".hierreward.lock"


class PipelineError(HierRewardError):
    """A stage could not run: missing prerequisite, failed seed, locked output directory."""


def dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(obj))


def read_json(path: Path):
    if not path.exists():
        raise PipelineError(f"missing artifact {path}; run the earlier stage first")
    return json.loads(path.read_text())


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class Run:
    """Paths, config and manifest bookkeeping for one output directory."""

    def __init__(self, loaded: LoadedConfig, cfg: RunConfig, overrides: dict):
        self.loaded = loaded
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.overrides = overrides
        self.manifest: dict = {}

    # paths
    def seed_dir(self, seed: int) -> Path:
        return self.out / f"seed_{seed}"

    def method_dir(self, seed: int, method: Method) -> Path:
        return self.seed_dir(seed) / Method(method).value

    def judge_path(self, seed: int, a: Method, b: Method) -> Path:
        return self.seed_dir(seed) / "judge" / f"{a.value}__{b.value}.jsonl"

    def rel(self, path: Path) -> str:
        return path.relative_to(self.out).as_posix()

    # manifest
    def open(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / MANIFEST
        old = json.loads(path.read_text()) if path.exists() else {}
        if old.get("config_sha256") == self.loaded.sha256:
            self.manifest = old
        else:
            if old:
                logger.warning("config changed since the last run in %s; starting a fresh manifest", self.out)
            self.manifest = {"created_at": _now(), "stages": {}, "artifacts": {}}
        self.manifest.update(
            config_sha256=self.loaded.sha256,
            config_file="config.yaml",
            software_version=__version__,
            overrides=self.overrides,
        )
        (self.out / "config.yaml").write_bytes(self.loaded.raw)
        self.save()

    def stage(self, name: str, status: str, **extra) -> None:
        entry = {"status": status, "updated_at": _now(), **extra}
        self.manifest.setdefault("stages", {})[name] = entry
        self.save()

    def record(self, key: str, value) -> None:
        self.manifest.setdefault("artifacts", {})[key] = value
        self.save()

    def save(self) -> None:
        self.manifest["updated_at"] = _now()
        write_json(self.out / MANIFEST, self.manifest)


# ---------------------------------------------------------------------------
# stages


def _reference_prompts(cfg: RunConfig, n: int) -> list[int]:
    return [i % cfg.train.train_prompts for i in range(n)]


def cmd_calibrate(run: Run) -> dict:
    """Fit holistic normalization per seed and the shared superior-area cut-off."""
    cfg = run.cfg
    env = cfg.env
    p0 = initial_policy(env, cfg.train)

    ref = sample_prompts(p0, _reference_prompts(cfg, cfg.reference.size), env, env.seed, seeding.REFERENCE)
    qs = [quality(t, env) for t in ref]
    q_star = superior_threshold(qs, env)
    reference = {
        "q_star": q_star,
        "superior_quantile": env.superior_quantile,
        "size": len(qs),
        "mean_quality": sum(qs) / len(qs),
        "reference_rate": sum(1 for q in qs if q >= q_star) / len(qs),
    }
    write_json(run.out / "reference.json", reference)
    artifacts = {"reference": "reference.json", "calibration": {}}

    for seed in cfg.seeds:
        trajs = sample_prompts(p0, _reference_prompts(cfg, cfg.calibration.size), env, seed, seeding.CALIBRATION)
        raw = [holistic_reward(t, env) for t in trajs]
        stats = fit_normalization(raw, source=f"calibration/seed_{seed}/n={len(raw)}")
        z = [z_normalize(x, stats) for x in raw]
        if cfg.reward.threshold is not None:
            threshold = float(cfg.reward.threshold)
        else:
            threshold = quantile_threshold(z, cfg.reward.top_fraction)
        payload = {
            "seed": seed,
            "stats": stats.to_dict(),
            "threshold": threshold,
            "top_fraction": cfg.reward.top_fraction,
            "admitted_fraction": sum(1 for v in z if v >= threshold) / len(z),
        }
        path = run.seed_dir(seed) / "calibration.json"
        write_json(path, payload)
        artifacts["calibration"][str(seed)] = run.rel(path)
        logger.info(
            "seed %d: holistic mean %.4f std %.4f, threshold %.4f admits %.3f",
            seed, stats.mean, stats.stddev, threshold, payload["admitted_fraction"],
        )
    run.record("calibrate", artifacts)
    return reference


def selection_pairs(cfg: RunConfig, seed: int, aspects: Sequence[AspectSpec]) -> list[ComparisonPair]:
    env = cfg.env
    p0 = initial_policy(env, cfg.train)
    ids = list(range(cfg.selection.prompts))
    greedy = generate_batch(p0, ids, DecodeMode.GREEDY, env)
    sampled = sample_prompts(p0, ids, env, seed, seeding.SELECTION)
    pairs = []
    for a, b in zip(greedy, sampled):
        scores = {
            x.name: (signal_statistic(aspect_reward(a, x, env)), signal_statistic(aspect_reward(b, x, env)))
            for x in aspects
        }
        pairs.append(ComparisonPair(a.prompt_id, holistic_reward(a, env), holistic_reward(b, env), scores, a, b))
    return pairs


def cmd_select(run: Run) -> dict[int, SelectionReport]:
    cfg = run.cfg
    candidates = [cfg.aspect(n) for n in cfg.candidates]
    reports = {}
    artifacts = {}
    for seed in cfg.seeds:
        pairs = selection_pairs(cfg, seed, candidates)
        report = select_rewards(pairs, [a.name for a in candidates], cfg.selection.max_selected)
        report = dataclasses.replace(report, metadata={"seed": seed, "prompts": cfg.selection.prompts})
        path = run.seed_dir(seed) / "selection.json"
        write_json(path, report.to_dict())
        artifacts[str(seed)] = run.rel(path)
        reports[seed] = report
        logger.info(
            "seed %d: chose %s (%s)",
            seed,
            list(report.chosen),
            ", ".join(f"{k}={v.inconsistency:.3f}" for k, v in sorted(report.aspects.items())),
        )
    run.record("select", artifacts)
    return reports


def reward_setup(run: Run, seed: int) -> tuple[HierarchicalRewardConfig, NormalizationStats, list[AspectSpec]]:
    cfg = run.cfg
    cal = read_json(run.seed_dir(seed) / "calibration.json")
    stats = NormalizationStats.from_dict(cal["stats"])
    if cfg.reward.aspects is not None:
        weighted = list(cfg.reward.aspects)
    else:
        report = SelectionReport.from_dict(read_json(run.seed_dir(seed) / "selection.json"))
        weighted = [(n, 1.0) for n in report.chosen]
    reward_cfg = HierarchicalRewardConfig(
        threshold=float(cal["threshold"]),
        holistic_weight=cfg.reward.holistic_weight,
        aspect_weights=dict(weighted),
        shaping=cfg.reward.shaping,
        selected_aspects=tuple(n for n, _ in weighted),
    )
    return reward_cfg, stats, [cfg.aspect(n) for n, _ in weighted]


def cmd_train(run: Run) -> None:
    cfg = run.cfg
    q_star = float(read_json(run.out / "reference.json")["q_star"])
    results: dict[str, dict] = dict(run.manifest.get("artifacts", {}).get("train", {}))
    failures = []
    for seed in cfg.seeds:
        reward_cfg, stats, aspects = reward_setup(run, seed)
        train_cfg = dataclasses.replace(cfg.train, seed=seed)
        seed_entry = dict(results.get(str(seed), {}))
        for method in cfg.methods:
            out_dir = run.method_dir(seed, method)
            logger.info("training %s, seed %d", method.value, seed)
            try:
                res = train(
                    method, train_cfg, cfg.env, reward_cfg, stats, aspects, q_star,
                    out_dir=out_dir, config_hash=run.loaded.sha256, progress=_log_progress,
                )
            except Exception as exc:  # recorded per seed, re-raised once all seeds ran
                logger.error("seed %d, %s failed: %s", seed, method.value, exc)
                seed_entry[method.value] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
                failures.append((seed, method, exc))
                continue
            write_json(
                out_dir / "run.json",
                {
                    "method": method.value,
                    "seed": seed,
                    "q_star": q_star,
                    "stats": stats.to_dict(),
                    "threshold": reward_cfg.threshold,
                    "holistic_weight": reward_cfg.holistic_weight,
                    "shaping": reward_cfg.shaping.value,
                    "aspects": {n: reward_cfg.weight(n) for n in reward_cfg.selected_aspects},
                    "config_sha256": run.loaded.sha256,
                },
            )
            seed_entry[method.value] = {
                "status": "complete",
                "checkpoints": [run.rel(p) for p in res.checkpoints],
                "trajectories": run.rel(res.trajectory_log) if res.trajectory_log else None,
                "history": run.rel(out_dir / "history.json"),
                "run": run.rel(out_dir / "run.json"),
            }
        results[str(seed)] = seed_entry
        run.record("train", results)
    if failures:
        seed, method, exc = failures[0]
        if all(isinstance(e, DegenerateDataError) for _, _, e in failures):
            raise exc
        raise PipelineError(f"{len(failures)} training run(s) failed, first: seed {seed} {method.value}: {exc}")


def _log_progress(entry: dict) -> None:
    if "eval" in entry:
        e = entry["eval"]
        logger.info(
            "  episodes %d: reward %.3f, greedy holistic %.3f, quality %.4f, superior %.3f",
            entry["episodes"], entry["mean_reward"], e["mean_holistic"], e["mean_quality"],
            e.get("superior_area_rate", float("nan")),
        )


def final_checkpoint(run: Run, seed: int, method: Method) -> PolicyParams:
    ckpts = sorted(run.method_dir(seed, method).glob("checkpoint_*.json"))
    if not ckpts:
        raise PipelineError(f"no checkpoint for seed {seed}, {method.value}; run train first")
    return load_checkpoint(ckpts[-1])


def eval_records(run: Run, params: PolicyParams, q_star: float) -> list[EvalRecord]:
    cfg = run.cfg
    env = cfg.env
    trajs = generate_batch(params, eval_prompt_ids(cfg.train), DecodeMode.GREEDY, env)
    out = []
    for t in trajs:
        q = quality(t, env)
        metrics = {"holistic": holistic_reward(t, env), "quality": q, "superior": 1.0 if q >= q_star else 0.0}
        for a in cfg.aspects:
            metrics[a.name] = signal_statistic(aspect_reward(t, a, env))
        out.append(EvalRecord(t.prompt_id, t.tokens, metrics))
    return out


def write_jsonl(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_records(path: Path) -> list[EvalRecord]:
    if not path.exists():
        raise PipelineError(f"missing {path}; run evaluate first")
    return [EvalRecord.from_dict(json.loads(line)) for line in path.read_text().splitlines() if line]


def _instruction(prompt_id: int, env) -> str:
    ctx = env.prompt_context(prompt_id)
    start = "the beginning" if ctx == env.bos_state else f"token w{ctx}"
    return f"Continue the word sequence from {start} with fluent, non-repeating, high-quality words."


def cmd_evaluate(run: Run) -> None:
    cfg = run.cfg
    q_star = float(read_json(run.out / "reference.json")["q_star"])
    methods = list(cfg.methods)
    index = {m.value: i for i, m in enumerate(Method)}
    artifacts: dict = {"eval": {}, "judge": {}}
    judge_mode = cfg.eval.judge.mode
    client = None
    if judge_mode is JudgeMode.HTTP:
        client = JudgeClient(cfg.eval.judge.http)
    try:
        for seed in cfg.seeds:
            records = {}
            for m in methods:
                recs = eval_records(run, final_checkpoint(run, seed, m), q_star)
                path = run.method_dir(seed, m) / "eval.jsonl"
                write_jsonl(path, (r.to_dict() for r in recs))
                artifacts["eval"].setdefault(str(seed), {})[m.value] = run.rel(path)
                records[m] = recs
            if judge_mode is JudgeMode.NONE:
                continue
            sim = simulated_judge_fn(cfg.env, cfg.eval.judge.sigma, cfg.env.seed, index)
            for i, a in enumerate(methods):
                for b in methods[i + 1 :]:
                    if client is None:
                        verdicts = sim(a.value, b.value, seed, records[a], records[b])
                    else:
                        verdicts = _http_verdicts(client, cfg, a, b, seed, records[a], records[b])
                    path = run.judge_path(seed, a, b)
                    write_jsonl(path, (v.to_dict() for v in verdicts))
                    acc = account(verdicts)
                    logger.info(
                        "seed %d judge %s vs %s: %d wins, %d losses, %d discarded",
                        seed, a.value, b.value, acc.wins, acc.losses, acc.discarded,
                    )
                    artifacts["judge"].setdefault(str(seed), {})[f"{a.value}__{b.value}"] = run.rel(path)
    finally:
        if client is not None:
            client.close()
    artifacts["judge_mode"] = judge_mode.value
    run.record("evaluate", artifacts)


def _http_verdicts(client, cfg, a: Method, b: Method, seed: int, ra, rb) -> list[JudgeVerdict]:
    by_b = {r.prompt_id: r for r in rb}
    requests = [
        JudgeRequest(
            pair_id=f"{a.value}|{b.value}|{seed}|{x.prompt_id}",
            prompt=_instruction(x.prompt_id, cfg.env),
            gen_a=render_tokens(x.tokens),
            gen_b=render_tokens(by_b[x.prompt_id].tokens),
        )
        for x in ra
    ]
    verdicts = judge_pairs(requests, client)
    return [verdicts[r.pair_id] for r in requests]


def load_matrix_inputs(run: Run) -> tuple[dict, bool]:
    cfg = run.cfg
    all_runs = {m.value: {s: read_records(run.method_dir(s, m) / "eval.jsonl") for s in cfg.seeds} for m in cfg.methods}
    mode = run.manifest.get("artifacts", {}).get("evaluate", {}).get("judge_mode", cfg.eval.judge.mode.value)
    return all_runs, mode != JudgeMode.NONE.value


def cmd_report(run: Run) -> MethodMatrix:
    cfg = run.cfg
    if len(cfg.methods) < 2:
        raise PipelineError("report needs at least two methods")
    all_runs, with_judge = load_matrix_inputs(run)

    def stored_judge(a: str, b: str, seed: int, ra, rb) -> list[JudgeVerdict]:
        path = run.judge_path(seed, Method(a), Method(b))
        if not path.exists():
            raise PipelineError(f"missing judge verdicts {path}; run evaluate with a judge")
        return [JudgeVerdict.from_dict(json.loads(line)) for line in path.read_text().splitlines() if line]

    matrix = build_matrix(all_runs, cfg.metric_specs(), judge=stored_judge if with_judge else None)
    report_dir = run.out / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    write_json(report_dir / "matrix.json", matrix.to_dict())
    files = ["report/matrix.json"]
    for metric in matrix.metrics:
        (report_dir / f"winrate_{metric}.csv").write_text(matrix.table_csv(metric))
        files.append(f"report/winrate_{metric}.csv")
    (report_dir / "summary.csv").write_text(matrix.summary_csv())
    files.append("report/summary.csv")
    run.record("report", files)
    for metric in matrix.metrics:
        logger.info("win rates by %s:\n%s", metric, matrix.table_csv(metric).rstrip())
    logger.info("summary:\n%s", matrix.summary_csv().rstrip())
    return matrix


STAGES = {
    "calibrate": (cmd_calibrate,),
    "select": (cmd_select,),
    "train": (cmd_train,),
    "evaluate": (cmd_evaluate,),
    "report": (cmd_report,),
    "all": (cmd_calibrate, cmd_select, cmd_train, cmd_evaluate, cmd_report),
}


def execute(verb: str, run: Run) -> None:
    lock = filelock.FileLock(str(Path(run.cfg.output_dir) / LOCK), timeout=0)
    Path(run.cfg.output_dir).mkdir(parents=True, exist_ok=True)
    try:
        lock.acquire()
    except filelock.Timeout:
        raise PipelineError(f"{run.cfg.output_dir} is locked by another invocation") from None
    try:
        run.open()
        for fn in STAGES[verb]:
            name = fn.__name__.removeprefix("cmd_")
            run.stage(name, "running")
            try:
                fn(run)
            except Exception as exc:
                run.stage(name, "failed", error=f"{type(exc).__name__}: {exc}")
                raise
            run.stage(name, "complete")
    finally:
        lock.release()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hierreward",
        description="Hierarchical reward pipeline on a synthetic generation environment.",
    )
    parser.add_argument("verb", choices=list(STAGES), help="pipeline stage to run ('all' runs every stage)")
    parser.add_argument("--config", type=Path, default=None, help="YAML run config (defaults when omitted)")
    parser.add_argument("--seed-override", type=int, default=None, help="run a single seed instead of the config's list")
    parser.add_argument("--output-dir", default=None, help="override output_dir from the config")
    parser.add_argument("--method", default=None, choices=[m.value for m in Method], help="restrict to one method")
    parser.add_argument("--judge", default=None, choices=[j.value for j in JudgeMode], help="override eval.judge.mode")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-v info, -vv debug)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        loaded = load_config(args.config)
        overrides = {
            k: v
            for k, v in {
                "seed": args.seed_override,
                "output_dir": args.output_dir,
                "method": args.method,
                "judge": args.judge,
            }.items()
            if v is not None
        }
        cfg = with_overrides(loaded.config, **overrides)
        execute(args.verb, Run(loaded, cfg, overrides))
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except DegenerateDataError as exc:
        logger.error("degenerate data: %s", exc)
        return EXIT_DEGENERATE
    except Exception as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
