"""Command-line workflows.

Four subcommands: ``fvce`` preprocesses an image directory into clue
containers, ``evolve`` runs the self-evolution loop over a dataset,
``eval`` computes metrics from a predictions file, and
``dataset-validate`` checks dataset content invariants.

Exit codes: 0 success, 1 domain failure, 2 I/O or configuration failure.
Environment: ``FORGE_EVOLVE_TOKEN`` supplies the bearer token for remote
clients; ``FORGE_EVOLVE_LOG`` (off|info|debug) controls logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import __version__, clients, dataset, evolution, fvce, metrics
from .responses import Verdict

__all__ = ["main", "build_parser", "RunConfig"]

log = logging.getLogger("forge_evolve")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class RunConfig:
    """Resolved options for one evolve run."""

    dataset_path: Path
    output_dir: Path
    policy_url: str
    teacher_url: str
    embedder_url: str
    candidates: int
    keep: int
    iterations: int
    beta: float
    seed: int
    parallelism: int
    timeout_ms: int
    retries: int
    extra_info_dir: Path | None

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("--iterations must be >= 1")
        if self.parallelism < 1:
            raise ValueError("--parallelism must be >= 1")
        if not self.candidates >= self.keep >= 1:
            raise ValueError(
                f"need --candidates >= --keep >= 1, got "
                f"{self.candidates} and {self.keep}"
            )


def _setup_logging() -> None:
    level_name = os.environ.get("FORGE_EVOLVE_LOG", "off").lower()
    if level_name == "off":
        logging.disable(logging.CRITICAL)
        return
    logging.disable(logging.NOTSET)
    levels = {"info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        level=levels.get(level_name, logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    log.setLevel(levels.get(level_name, logging.INFO))


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forge-evolve",
        description=__doc__,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_fvce = sub.add_parser(
        "fvce",
        help="extract restoration-difference clue containers from images",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_fvce.add_argument("input_dir", type=Path, help="directory of PNG/JPEG images")
    p_fvce.add_argument(
        "--restorer",
        choices=("identity", "lowpass", "precomputed"),
        default="lowpass",
        help="restoration backend; 'precomputed' reads <stem>.restore.<n>.png files",
    )
    p_fvce.add_argument(
        "--steps", type=int, default=fvce.DEFAULT_STEPS, help="restoration steps N"
    )
    p_fvce.add_argument(
        "--last",
        type=int,
        default=fvce.DEFAULT_LAST,
        help="use the last K+1 restorations (indices N-K..N)",
    )
    p_fvce.add_argument(
        "--max-sigma",
        type=float,
        default=4.0,
        help="coarsest blur radius of the lowpass restorer",
    )
    p_fvce.add_argument(
        "--out", type=Path, default=None, help="output directory (default: input dir)"
    )
    p_fvce.add_argument(
        "--viz", action="store_true", help="also write per-plane preview PNGs"
    )
    p_fvce.add_argument(
        "--parallelism", type=int, default=4, help="concurrent image workers"
    )

    p_evolve = sub.add_parser(
        "evolve",
        help="run the self-evolution loop over a dataset",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_evolve.add_argument("--dataset", type=Path, required=True, help="JSONL dataset")
    p_evolve.add_argument(
        "--out", type=Path, required=True, help="directory for trajectory files"
    )
    p_evolve.add_argument(
        "--policy-url",
        default="mock:scripted",
        help="policy endpoint URL, or mock:scripted (samples from the record's "
        "polls, falling back to its answer)",
    )
    p_evolve.add_argument(
        "--teacher-url",
        default="mock:cosine-to-target",
        help="teacher endpoint URL, or mock:cosine-to-target (aligns to the "
        "record's answer)",
    )
    p_evolve.add_argument(
        "--embedder-url",
        default="mock:hashing",
        help="embedder endpoint URL, or mock:hashing",
    )
    p_evolve.add_argument(
        "--candidates", type=int, default=8, help="responses sampled per round (C)"
    )
    p_evolve.add_argument(
        "--keep", type=int, default=4, help="responses kept after filtering (M)"
    )
    p_evolve.add_argument(
        "--iterations", type=int, default=3, help="evolution rounds per sample (T)"
    )
    p_evolve.add_argument(
        "--beta", type=float, default=1.5, help="rank-reward weight"
    )
    p_evolve.add_argument("--seed", type=int, default=0, help="mock client seed")
    p_evolve.add_argument(
        "--parallelism", type=int, default=4, help="concurrent sample workers"
    )
    p_evolve.add_argument(
        "--timeout-ms", type=int, default=30_000, help="client timeout"
    )
    p_evolve.add_argument(
        "--retries", type=int, default=2, help="client retries on transport failure"
    )
    p_evolve.add_argument(
        "--extra-info-dir",
        type=Path,
        default=None,
        help="directory of .fvce containers referenced in sampling requests",
    )

    p_eval = sub.add_parser(
        "eval",
        help="compute ACC/AUC/EER (and CIDEr when texts are present)",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_eval.add_argument(
        "--input",
        type=Path,
        required=True,
        help="predictions JSONL: {id, score?, verdict, label, candidate_text?, "
        "reference_texts?}; without a score, verdicts map to "
        "forgery=1, real=0, unknown=0.5",
    )
    p_eval.add_argument(
        "--cider-variant",
        choices=("original", "d"),
        default="original",
        help="CIDEr formulation",
    )

    p_validate = sub.add_parser(
        "dataset-validate",
        help="check a dataset file's content invariants",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_validate.add_argument("dataset_path", type=Path, help="JSONL dataset file")
    p_validate.add_argument(
        "--image-root",
        type=Path,
        default=None,
        help="base directory for relative image paths (default: dataset's directory)",
    )
    return parser


def _iter_images(input_dir: Path) -> list[Path]:
    images = [
        p
        for p in sorted(input_dir.iterdir())
        if p.suffix.lower() in IMAGE_SUFFIXES and ".restore." not in p.name
    ]
    return images


def _fvce_one(image_path: Path, args: argparse.Namespace, out_dir: Path) -> list[str]:
    if args.restorer == "identity":
        restorer: fvce.RestorationBackend = fvce.IdentityRestorer()
    elif args.restorer == "lowpass":
        restorer = fvce.GaussianRestorer(max_sigma=args.max_sigma)
    else:
        restorer = fvce.PrecomputedRestorer.for_image(image_path, args.steps)
    image = fvce.load_image(image_path)
    stack = fvce.extract_clues(image, restorer, steps=args.steps, last=args.last)
    stem = image_path.name.rsplit(".", 1)[0]
    container = out_dir / f"{stem}.fvce"
    fvce.write_extra_info(container, stack.extra_info)
    written = [str(container)]
    if args.viz:
        written += [
            str(p) for p in fvce.write_plane_previews(out_dir / stem, stack.extra_info)
        ]
    return written


def cmd_fvce(args: argparse.Namespace) -> int:
    if args.steps < 1:
        print("error: --steps must be >= 1", file=sys.stderr)
        return 2
    if not 0 <= args.last <= args.steps - 1:
        print("error: --last must lie in 0..steps-1", file=sys.stderr)
        return 2
    if args.parallelism < 1:
        print("error: --parallelism must be >= 1", file=sys.stderr)
        return 2
    if args.max_sigma <= 0:
        print("error: --max-sigma must be positive", file=sys.stderr)
        return 2
    input_dir: Path = args.input_dir
    if not input_dir.is_dir():
        print(f"error: input directory not found: {input_dir}", file=sys.stderr)
        return 1
    out_dir = args.out if args.out is not None else input_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    images = _iter_images(input_dir)
    if not images:
        print(f"error: no images under {input_dir}", file=sys.stderr)
        return 1
    failures: list[tuple[Path, str]] = []
    done = 0
    with ThreadPoolExecutor(max_workers=args.parallelism) as executor:
        futures = {
            executor.submit(_fvce_one, path, args, out_dir): path for path in images
        }
        for future, path in futures.items():
            try:
                future.result()
                done += 1
            except Exception as exc:
                failures.append((path, str(exc)))
    for path, message in failures:
        print(f"error: {path}: {message}", file=sys.stderr)
    print(f"fvce: {done} of {len(images)} images processed, {len(failures)} failed")
    return 1 if failures else 0


_KNOWN_MOCKS = {
    "policy": {"scripted"},
    "teacher": {"cosine-to-target"},
    "embedder": {"hashing"},
}


def _check_mock_names(config: RunConfig) -> None:
    urls = {
        "policy": config.policy_url,
        "teacher": config.teacher_url,
        "embedder": config.embedder_url,
    }
    for role, url in urls.items():
        kind, name = clients.parse_endpoint(url)
        if kind == "mock" and name not in _KNOWN_MOCKS[role]:
            raise ValueError(
                f"unknown {role} mock {name!r}; known: "
                + ", ".join(sorted(_KNOWN_MOCKS[role]))
            )


def _prebuild_http_clients(config: RunConfig) -> dict:
    """Construct the shared HTTP clients once, before any worker threads."""
    http_config = lambda url: clients.ClientConfig(
        url, timeout_ms=config.timeout_ms, max_retries=config.retries
    )
    shared: dict = {}
    if clients.parse_endpoint(config.policy_url)[0] == "http":
        shared["policy"] = clients.build_policy(http_config(config.policy_url))
    if clients.parse_endpoint(config.teacher_url)[0] == "http":
        shared["teacher"] = clients.build_teacher(http_config(config.teacher_url))
    if clients.parse_endpoint(config.embedder_url)[0] == "http":
        shared["embedder"] = clients.build_embedder(http_config(config.embedder_url))
    return shared


def _make_clients(
    config: RunConfig, record: dataset.CotFaceRecord, shared: dict
) -> evolution.ClientSet:
    """HTTP clients are shared across records; mocks are built per record
    (the scripted pool and ranking target come from the record itself)."""
    policy = shared.get("policy")
    if policy is None:
        pool = list(record.polls) if record.polls else [record.answer]
        policy = clients.build_policy(
            clients.ClientConfig(config.policy_url, seed=config.seed),
            fixture_pool=pool,
        )
    teacher = shared.get("teacher")
    if teacher is None:
        teacher = clients.build_teacher(
            clients.ClientConfig(config.teacher_url, seed=config.seed),
            target=record.answer,
        )
    embedder = shared.get("embedder")
    if embedder is None:
        embedder = clients.build_embedder(
            clients.ClientConfig(config.embedder_url, seed=config.seed)
        )
    return evolution.ClientSet(policy=policy, teacher=teacher, embedder=embedder)


def _evolve_one(
    record: dataset.CotFaceRecord,
    run: RunConfig,
    evo_config: evolution.EvolutionConfig,
    shared: dict,
) -> tuple[str, str | None]:
    """Returns (record id, error message or None); writes the trajectory."""
    out_path = run.output_dir / f"{record.id}.trajectory.jsonl"
    try:
        client_set = _make_clients(run, record, shared)
        trajectory = evolution.run_evolution(
            record, run.iterations, client_set, evo_config, seed=run.seed
        )
    except evolution.EvolutionAborted as exc:
        _write_trajectory_atomic(out_path, exc.trajectory)
        return record.id, f"aborted at iteration {exc.iteration}: {exc.__cause__}"
    except Exception as exc:  # one bad record must not kill the batch
        log.debug("record %s failed", record.id, exc_info=True)
        return record.id, str(exc)
    _write_trajectory_atomic(out_path, trajectory)
    log.info("record %s: %d rounds written", record.id, len(trajectory))
    return record.id, None


def _write_trajectory_atomic(
    path: Path, trajectory: list[evolution.RoundRecord]
) -> None:
    lines = [
        json.dumps(r.to_json_dict(), ensure_ascii=False) + "\n" for r in trajectory
    ]
    _atomic_write_bytes(path, "".join(lines).encode("utf-8"))


def cmd_evolve(args: argparse.Namespace) -> int:
    try:
        run = RunConfig(
            dataset_path=args.dataset.resolve(),
            output_dir=args.out.resolve(),
            policy_url=args.policy_url,
            teacher_url=args.teacher_url,
            embedder_url=args.embedder_url,
            candidates=args.candidates,
            keep=args.keep,
            iterations=args.iterations,
            beta=args.beta,
            seed=args.seed,
            parallelism=args.parallelism,
            timeout_ms=args.timeout_ms,
            retries=args.retries,
            extra_info_dir=(
                args.extra_info_dir.resolve() if args.extra_info_dir else None
            ),
        )
        evo_config = evolution.EvolutionConfig(
            candidates=run.candidates,
            keep=run.keep,
            beta=run.beta,
            extra_info_dir=(
                str(run.extra_info_dir) if run.extra_info_dir is not None else None
            ),
        )
        _check_mock_names(run)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        records = dataset.load(run.dataset_path)
    except dataset.DatasetIoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    run.output_dir.mkdir(parents=True, exist_ok=True)
    try:
        shared = _prebuild_http_clients(run)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    failures: list[tuple[str, str]] = []
    final_rewards: list[float] = []
    with ThreadPoolExecutor(max_workers=run.parallelism) as executor:
        results = list(
            executor.map(
                lambda record: _evolve_one(record, run, evo_config, shared), records
            )
        )
    for record_id, error in results:
        if error is not None:
            failures.append((record_id, error))
            print(f"error: {record_id}: {error}", file=sys.stderr)
    for record in records:
        path = run.output_dir / f"{record.id}.trajectory.jsonl"
        if path.exists():
            rounds = [
                json.loads(line)
                for line in path.read_text(encoding="utf-8").splitlines()
                if line
            ]
            if rounds:
                final_rewards += [
                    c["reward"]["total"] for c in rounds[-1]["candidates"]
                ]
    mean_reward = sum(final_rewards) / len(final_rewards) if final_rewards else 0.0
    print(
        f"evolve: {len(records) - len(failures)} of {len(records)} samples completed,"
        f" mean final-round reward {mean_reward:.4f}"
    )
    return 1 if failures else 0


def _load_predictions(path: Path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {line_no}: invalid JSON: {exc}") from None
            if not isinstance(doc, dict):
                raise ValueError(f"line {line_no}: record is not an object")
            for key in ("verdict", "label"):
                if key not in doc:
                    raise ValueError(f"line {line_no}: missing field {key!r}")
            rows.append(doc)
    if not rows:
        raise ValueError("no prediction records")
    return rows


def _parse_verdict_field(value: str, line_context: str) -> Verdict | None:
    if value == "unknown":
        return None
    try:
        return Verdict.from_label(value)
    except ValueError as exc:
        raise ValueError(f"{line_context}: {exc}") from None


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        rows = _load_predictions(args.input)
    except OSError as exc:
        print(f"error: cannot read {args.input}: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        preds: list[Verdict | None] = []
        labels: list[Verdict] = []
        scored: list[metrics.ScoredPrediction] = []
        for i, row in enumerate(rows, start=1):
            verdict = _parse_verdict_field(str(row["verdict"]), f"record {i}")
            label = Verdict.from_label(str(row["label"]))
            preds.append(verdict)
            labels.append(label)
            score = row.get("score")
            if score is None:
                score = metrics.verdict_to_score(verdict)
            scored.append(metrics.ScoredPrediction(score=float(score), label=label))
        report = {
            "acc": metrics.accuracy(preds, labels),
            "auc": metrics.auc(scored),
            "eer": metrics.eer(scored),
        }
        if all(
            row.get("candidate_text") is not None
            and row.get("reference_texts")
            for row in rows
        ):
            report["cider"] = metrics.cider(
                [str(row["candidate_text"]) for row in rows],
                [[str(t) for t in row["reference_texts"]] for row in rows],
                variant=args.cider_variant,
            )
        report["n"] = len(rows)
        report["n_pos"] = sum(label is Verdict.FORGERY for label in labels)
        report["n_neg"] = sum(label is Verdict.REAL for label in labels)
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(report))
    return 0


def cmd_dataset_validate(args: argparse.Namespace) -> int:
    try:
        records = dataset.load(args.dataset_path)
    except (dataset.MalformedLineError, dataset.DuplicateIdError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except dataset.DatasetIoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    image_root = (
        args.image_root if args.image_root is not None else args.dataset_path.parent
    )
    report = dataset.validate(records, image_root=image_root)
    print(json.dumps(report.to_json_dict()))
    return 0 if report.clean else 1


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "fvce": cmd_fvce,
        "evolve": cmd_evolve,
        "eval": cmd_eval,
        "dataset-validate": cmd_dataset_validate,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
