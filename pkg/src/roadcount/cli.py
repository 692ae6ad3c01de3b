"""Command-line pipeline: configuration, orchestration, sweeps and timing.

Subcommands: synth, train, detect, track, count, sweep, bench, eval. Each
reads one flat `key = value` config file plus `--key value` overrides.
Exit codes: 0 success, 1 usage error (bad flags, bad config keys/values),
2 input/data error (missing or malformed scene, model, or image files).
"""

from __future__ import annotations

import argparse
import itertools
import sys
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from . import bgsub, synthgen
from .boostcascade import CascadeModel, detect, load_model, save_model, train_cascade
from .counting import (
    PHI_MAX,
    PHI_MIN,
    CountingPolicy,
    CountingReport,
    MarkerSet,
    make_report,
    report_text,
    result_line,
    should_count,
)
from .imaging import Frame, PgmError, Rect, downscale, load_pgm, sequence_paths
from .tracking import Tracker, track_log_line


class DataError(Exception):
    """Missing or malformed input data (exit code 2)."""


class UsageError(Exception):
    """Bad command line or configuration (exit code 1)."""


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the pipeline; all fields have defaults and flat-text form."""

    scene: str = ""
    model: str = ""
    events_out: str = ""
    detector: str = "bgsub"
    tracker: str = "ekf"
    resolution_factor: int = 1
    th: float = 10.0
    tfc: int = 8
    mhr: float = 0.995
    stages: int = 5
    mcc: int = 2
    scales: tuple[float, ...] = (1.0,)
    stride: int = 7
    markers: str = "auto"
    seed: int = 0
    frame_dt: float = 1.0
    learning_rate: float = 0.05
    open_radius: int = 1
    min_area: int = 25
    gate_fraction: float = 0.25
    max_misses: int = 5
    match_tol: int = 25
    distance_fraction: float = 0.2
    require_marker_overlap: bool = False
    phi_min: float = PHI_MIN
    phi_max: float = PHI_MAX
    window_w: int = 30
    window_h: int = 30
    train_pos: int = 1000
    train_neg: int = 5000
    train_hard: int = 6000

    def __post_init__(self):
        if self.detector not in ("bgsub", "feature"):
            raise ValueError(f"detector must be 'bgsub' or 'feature', got {self.detector!r}")
        if self.tracker not in ("ekf", "none"):
            raise ValueError(f"tracker must be 'ekf' or 'none', got {self.tracker!r}")
        if self.resolution_factor < 1:
            raise ValueError(f"resolution_factor must be >= 1, got {self.resolution_factor}")


@dataclass(frozen=True)
class BenchRecord:
    """Wall-clock per-frame timing of one pipeline stage."""

    stage: str
    mean_ms: float
    p50_ms: float
    p95_ms: float
    frames: int

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError(f"frames must be >= 1, got {self.frames}")


def bench_line(record: BenchRecord) -> str:
    return (
        f"BENCH stage={record.stage} mean_ms={record.mean_ms:.3f} "
        f"p50_ms={record.p50_ms:.3f} p95_ms={record.p95_ms:.3f} frames={record.frames}"
    )


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.17g}"
    if isinstance(value, tuple):
        return ",".join(f"{v:.17g}" for v in value)
    return str(value)


def _coerce(key: str, default, raw: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(part) for part in raw.split(",") if part.strip())
        return raw
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {exc}") from exc


def config_to_text(config: PipelineConfig) -> str:
    """Flat echo of the config; parse(print(config)) round-trips exactly."""
    return "".join(
        f"{f.name} = {_format_value(getattr(config, f.name))}\n" for f in fields(config)
    )


def config_from_values(values: dict[str, str]) -> PipelineConfig:
    defaults = {f.name: f.default for f in fields(PipelineConfig)}
    unknown = set(values) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {
        key: _coerce(key, defaults[key], raw)
        for key, raw in values.items()
    }
    try:
        return PipelineConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def config_from_text(text: str) -> PipelineConfig:
    try:
        values = synthgen.parse_flat_config(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return config_from_values(values)


def apply_overrides(config: PipelineConfig, overrides: dict[str, str]) -> PipelineConfig:
    defaults = {f.name: f.default for f in fields(PipelineConfig)}
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    changes = {
        key: _coerce(key, defaults[key], raw)
        for key, raw in overrides.items()
    }
    try:
        return replace(config, **changes)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _scale_rect(rect: Rect, factor: int) -> Rect:
    """Map a rect into downscaled coordinates, keeping at least 1 px extent."""
    if factor == 1:
        return rect
    x = rect.x // factor
    y = rect.y // factor
    right = -(-rect.right // factor)
    bottom = -(-rect.bottom // factor)
    return Rect(x, y, max(right - x, 1), max(bottom - y, 1))


def _resolve_markers(config: PipelineConfig, scene_dir: str, width: int, height: int) -> MarkerSet:
    """Markers from the config string, or from scenario.cfg when set to auto.

    Auto markers live in native scene resolution and are scaled down by the
    resolution factor; explicit markers are taken to be in working
    (post-downscale) coordinates already.
    """
    if config.markers == "auto":
        try:
            scenario = synthgen.load_scene_config(scene_dir)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot derive auto markers from {scene_dir}: {exc}") from exc
        rects = [_scale_rect(m, config.resolution_factor) for m in scenario.markers]
    else:
        try:
            rects = [
                Rect(*(int(p) for p in chunk.split(",")))
                for chunk in config.markers.split(";")
                if chunk
            ]
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad markers value {config.markers!r}: {exc}") from exc
    try:
        markers = MarkerSet.from_rects(rects)
        markers.check_bottom_third(width, height)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return markers


def _load_frame(path: str, factor: int) -> Frame:
    frame = load_pgm(path)
    if factor > 1:
        frame = downscale(frame, factor)
    return frame


def _scene_frame_paths(scene_dir: str) -> list[str]:
    try:
        paths = sequence_paths(f"{scene_dir}/frames")
    except OSError as exc:
        raise DataError(f"cannot list scene frames in {scene_dir}: {exc}") from exc
    if not paths:
        raise DataError(f"no frames found under {scene_dir}/frames")
    return paths


def _load_cascade(config: PipelineConfig) -> CascadeModel:
    if not config.model:
        raise UsageError("detector=feature requires a model path")
    try:
        return load_model(config.model)
    except FileNotFoundError as exc:
        raise DataError(f"model file not found: {config.model}") from exc
    except ValueError as exc:
        raise DataError(f"malformed model file {config.model}: {exc}") from exc


class _Pipeline:
    """Sequential detect -> track -> count loop over one scene directory."""

    def __init__(self, config: PipelineConfig):
        if not config.scene:
            raise UsageError("a scene directory is required (key: scene)")
        self.config = config
        self.paths = _scene_frame_paths(config.scene)
        first = _load_frame(self.paths[0], config.resolution_factor)
        self.width = first.width
        self.height = first.height
        self.markers = _resolve_markers(config, config.scene, self.width, self.height)
        self.cascade = _load_cascade(config) if config.detector == "feature" else None
        self.background = bgsub.BackgroundModel(self.width, self.height, config.learning_rate)
        self.tracker = Tracker(
            kind=config.tracker,
            gate=config.gate_fraction * max(self.width, self.height),
            max_misses=config.max_misses,
        )
        self.policy = CountingPolicy(
            mode=config.detector,
            tfc=config.tfc,
            phi_min=config.phi_min,
            phi_max=config.phi_max,
            distance_fraction=config.distance_fraction,
            require_marker_overlap=config.require_marker_overlap,
        )
        self.counted: list[tuple[int, int]] = []
        self.times: dict[str, list[float]] = {"detect": [], "track": [], "count": []}

    def _detect(self, frame: Frame) -> list[tuple[Rect, float]]:
        if self.cascade is not None:
            found = detect(
                self.cascade, frame,
                scales=self.config.scales, stride=self.config.stride, mcc=self.config.mcc,
            )
            return [(d.rect, d.score) for d in found]
        if self.background.initialized:
            mask = bgsub.subtract(self.background, frame, self.config.th)
            mask = bgsub.morphological_open(mask, self.config.open_radius)
            blobs = bgsub.extract_blobs(mask, self.config.min_area)
        else:
            blobs = []
        bgsub.update_background(self.background, frame)
        return [(rect, 0.0) for rect in blobs]

    def _count(self, finished) -> None:
        for track in finished:
            counted, marker = should_count(
                track, self.policy, self.markers, self.width, self.height
            )
            if counted:
                self.counted.append((track.last_seen_frame, marker))

    def run(
        self,
        limit: int | None = None,
        on_detections=None,
        on_tracks=None,
    ) -> None:
        paths = self.paths if limit is None else self.paths[:limit]
        for frame_idx, path in enumerate(paths):
            frame = _load_frame(path, self.config.resolution_factor)
            t0 = time.perf_counter()
            detections = self._detect(frame)
            t1 = time.perf_counter()
            live, finished = self.tracker.step([r for r, _ in detections], self.config.frame_dt)
            t2 = time.perf_counter()
            self._count(finished)
            t3 = time.perf_counter()
            self.times["detect"].append(t1 - t0)
            self.times["track"].append(t2 - t1)
            self.times["count"].append(t3 - t2)
            if on_detections is not None:
                on_detections(frame_idx, detections)
            if on_tracks is not None:
                on_tracks(frame_idx, live)
        self._count(self.tracker.flush())

    def report(self) -> CountingReport:
        try:
            gt_events = synthgen.load_gt_events(self.config.scene)
        except FileNotFoundError:
            gt_events = []
        gt_pairs = [(frame_idx, marker) for frame_idx, _, marker in gt_events]
        return make_report(
            self.counted, gt_pairs, self.config.match_tol, len(self.markers.markers)
        )

    def bench_records(self, warmup: int = 0) -> list[BenchRecord]:
        records = []
        for stage in ("detect", "track", "count"):
            samples = np.array(self.times[stage][warmup:]) * 1000.0
            if len(samples) == 0:
                raise UsageError("no frames measured after warmup")
            records.append(
                BenchRecord(
                    stage=stage,
                    mean_ms=float(samples.mean()),
                    p50_ms=float(np.percentile(samples, 50)),
                    p95_ms=float(np.percentile(samples, 95)),
                    frames=len(samples),
                )
            )
        return records


def run_pipeline(config: PipelineConfig) -> tuple[CountingReport, list[BenchRecord]]:
    """Process the whole scene; returns the counting report and stage timings."""
    pipeline = _Pipeline(config)
    pipeline.run()
    return pipeline.report(), pipeline.bench_records()


def bench(config: PipelineConfig, warmup: int, measured: int) -> list[BenchRecord]:
    """Time the pipeline stages over `measured` frames after `warmup` frames."""
    if measured < 1:
        raise UsageError(f"measured frames must be >= 1, got {measured}")
    if warmup < 0:
        raise UsageError(f"warmup must be >= 0, got {warmup}")
    pipeline = _Pipeline(config)
    pipeline.run(limit=warmup + measured)
    return pipeline.bench_records(warmup=warmup)


def sweep(config: PipelineConfig, grid: dict[str, list[str]]) -> tuple[list[str], list[list[str]]]:
    """Run the Cartesian product of the grid; returns (header, rows).

    Keys are ordered alphabetically, values in the order given, and the
    product iterates with the rightmost key fastest, so rows come out in
    lexicographic parameter order.
    """
    if not grid:
        raise UsageError("sweep needs a nonempty grid")
    keys = sorted(grid)
    for key, values in grid.items():
        if not values:
            raise UsageError(f"sweep grid for {key} is empty")
    header = keys + ["fp", "fn", "gt", "acc_real", "acc_int"]
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        point = apply_overrides(config, dict(zip(keys, combo)))
        report, _ = run_pipeline(point)
        if report.accuracy_real is None:
            acc_real, acc_int = "NA", "NA"
        else:
            acc_real, acc_int = f"{report.accuracy_real:.2f}", str(report.accuracy_int)
        rows.append(list(combo) + [str(report.fp), str(report.fn), str(report.gt), acc_real, acc_int])
    return header, rows


# Hard negatives come from a jitter-displaced clone of the scenario: the
# rendered vehicles shift away from their (unjittered) ground-truth boxes, so
# zero-GT-overlap crops can legally contain partial vehicle views. The margin
# keeps the displaced vehicle overlapping its own box, so no negative ever
# shows a complete vehicle.
_HARD_JITTER_MARGIN = 4
_HARD_POOL_FACTOR = 10
_HARD_TEXTURE_STD = 12.0


def _hard_negatives(scenario, count: int, window_w: int, window_h: int):
    amplitude = max(window_w, window_h) - _HARD_JITTER_MARGIN
    if amplitude < 1 or count < 1:
        return []
    shifted = replace(scenario, jitter_amplitude=amplitude)
    _, pool = synthgen.generate_training_set(
        shifted, 1, count * _HARD_POOL_FACTOR, window_w, window_h
    )
    textured = [crop for crop in pool if crop.pixels.std() > _HARD_TEXTURE_STD]
    return textured[:count]


def train(config: PipelineConfig) -> CascadeModel:
    """Train a cascade from crops sampled out of the scene's own scenario.

    Negatives mix plain background crops with textured crops harvested from
    a jittered clone of the scenario (partial vehicle views that still have
    zero ground-truth overlap); the later cascade stages train almost
    exclusively on those, which keeps the detector from firing on windows
    that only graze a vehicle. Stage s gets 2*s + 4 boosting rounds.
    """
    if not config.scene:
        raise UsageError("training requires a scene directory (key: scene)")
    if not config.model:
        raise UsageError("training requires an output model path (key: model)")
    try:
        scenario = synthgen.load_scene_config(config.scene)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load scenario from {config.scene}: {exc}") from exc
    positives, _ = synthgen.generate_training_set(
        scenario, config.train_pos, 1, config.window_w, config.window_h
    )
    _, plain = synthgen.generate_training_set(
        scenario, 1, config.train_neg, config.window_w, config.window_h
    )
    negatives = list(plain) + _hard_negatives(
        scenario, config.train_hard, config.window_w, config.window_h
    )
    rounds = tuple(2 * s + 4 for s in range(1, config.stages + 1))
    model = train_cascade(positives, negatives, config.stages, config.mhr, rounds=rounds)
    save_model(model, config.model)
    return model


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_overrides(rest: list[str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    i = 0
    while i < len(rest):
        arg = rest[i]
        if not arg.startswith("--"):
            raise UsageError(f"unexpected argument {arg!r} (overrides are --key value)")
        if "=" in arg:
            key, value = arg[2:].split("=", 1)
            i += 1
        else:
            key = arg[2:]
            if i + 1 >= len(rest):
                raise UsageError(f"override {arg!r} is missing a value")
            value = rest[i + 1]
            i += 2
        overrides[key] = value
    return overrides


def _load_config(args, overrides: dict[str, str]) -> PipelineConfig:
    if args.config:
        try:
            with open(args.config, "r", encoding="ascii") as fh:
                config = config_from_text(fh.read())
        except FileNotFoundError as exc:
            raise DataError(f"config file not found: {args.config}") from exc
    else:
        config = PipelineConfig()
    return apply_overrides(config, overrides)


def _cmd_synth(args, overrides: dict[str, str]) -> int:
    try:
        with open(args.config, "r", encoding="ascii") as fh:
            values = synthgen.parse_flat_config(fh.read())
    except FileNotFoundError as exc:
        raise DataError(f"scenario file not found: {args.config}") from exc
    except ValueError as exc:
        raise DataError(f"malformed scenario file {args.config}: {exc}") from exc
    values.update(overrides)
    try:
        scenario = synthgen.config_from_values(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad scenario: {exc}") from exc
    gt = synthgen.save_scene(args.out, scenario)
    print(f"wrote {scenario.frames} frames, {len(gt.boxes)} boxes, "
          f"{len(gt.events)} events to {args.out}")
    return 0


def _cmd_train(args, overrides: dict[str, str]) -> int:
    config = _load_config(args, overrides)
    model = train(config)
    stumps = sum(len(s.stumps) for s in model.stages)
    print(f"trained {len(model.stages)} stages ({stumps} stumps) -> {config.model}")
    return 0


def _open_out(path: str | None):
    return open(path, "w", encoding="ascii") if path else None


def _cmd_detect(args, overrides: dict[str, str]) -> int:
    config = _load_config(args, overrides)
    out = _open_out(args.out)
    sink = out or sys.stdout

    def emit(frame_idx, detections):
        for rect, score in detections:
            sink.write(f"{frame_idx} {rect.x} {rect.y} {rect.w} {rect.h} {score:.6g}\n")

    pipeline = _Pipeline(config)
    pipeline.run(on_detections=emit)
    if out:
        out.close()
    return 0


def _cmd_track(args, overrides: dict[str, str]) -> int:
    config = _load_config(args, overrides)
    out = _open_out(args.out)
    sink = out or sys.stdout

    def emit(frame_idx, live):
        for track in live:
            sink.write(track_log_line(frame_idx, track) + "\n")

    pipeline = _Pipeline(config)
    pipeline.run(on_tracks=emit)
    if out:
        out.close()
    return 0


def _cmd_count(args, overrides: dict[str, str]) -> int:
    config = _load_config(args, overrides)
    pipeline = _Pipeline(config)
    pipeline.run()
    report = pipeline.report()
    if config.events_out:
        with open(config.events_out, "w", encoding="ascii") as fh:
            for frame_idx, marker in report.events:
                fh.write(f"{frame_idx} {marker}\n")
    print(report_text(report))
    print(result_line(report))
    return 0


def _cmd_sweep(args, overrides: dict[str, str]) -> int:
    config = _load_config(args, overrides)
    grid: dict[str, list[str]] = {}
    for item in args.grid:
        if "=" not in item:
            raise UsageError(f"grid entries must be key=v1,v2,..., got {item!r}")
        key, values = item.split("=", 1)
        grid[key.strip()] = [v.strip() for v in values.split(",") if v.strip()]
    header, rows = sweep(config, grid)
    print("\t".join(header))
    for row in rows:
        print("\t".join(row))
    return 0


def _cmd_bench(args, overrides: dict[str, str]) -> int:
    config = _load_config(args, overrides)
    for record in bench(config, args.warmup, args.frames):
        print(bench_line(record))
    return 0


def _cmd_eval(args, overrides: dict[str, str]) -> int:
    config = _load_config(args, overrides)
    if not config.scene:
        raise UsageError("eval requires a scene directory (key: scene)")
    counted = []
    try:
        with open(args.events, "r", encoding="ascii") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                frame_idx, marker = (int(p) for p in line.split())
                counted.append((frame_idx, marker))
    except FileNotFoundError as exc:
        raise DataError(f"events file not found: {args.events}") from exc
    except ValueError as exc:
        raise DataError(f"malformed events file {args.events}: {exc}") from exc
    try:
        gt_events = synthgen.load_gt_events(config.scene)
    except FileNotFoundError as exc:
        raise DataError(f"scene has no gt_events.txt: {config.scene}") from exc
    gt_pairs = [(frame_idx, marker) for frame_idx, _, marker in gt_events]
    n_markers = max(
        [m for _, m in counted + gt_pairs], default=0
    ) + 1
    report = make_report(counted, gt_pairs, config.match_tol, n_markers)
    print(result_line(report))
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="roadcount", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="render a synthetic scene directory")
    synth.add_argument("--config", required=True, help="scenario config file")
    synth.add_argument("--out", required=True, help="output scene directory")
    synth.set_defaults(func=_cmd_synth)

    for name, func, help_text in (
        ("train", _cmd_train, "train a cascade model from a scene's scenario"),
        ("detect", _cmd_detect, "run the detector and emit per-frame detections"),
        ("track", _cmd_track, "run detector+tracker and emit track log lines"),
        ("count", _cmd_count, "run the full pipeline and report counts"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", help="pipeline config file")
        if name in ("detect", "track"):
            cmd.add_argument("--out", help="output file (default stdout)")
        cmd.set_defaults(func=func)

    swp = sub.add_parser("sweep", help="run a parameter grid")
    swp.add_argument("--config", help="pipeline config file")
    swp.add_argument("--grid", action="append", required=True,
                     help="key=v1,v2,... (repeatable)")
    swp.set_defaults(func=_cmd_sweep)

    bch = sub.add_parser("bench", help="time pipeline stages per frame")
    bch.add_argument("--config", help="pipeline config file")
    bch.add_argument("--warmup", type=int, default=5)
    bch.add_argument("--frames", type=int, default=50)
    bch.set_defaults(func=_cmd_bench)

    evl = sub.add_parser("eval", help="evaluate a counted-events file against GT")
    evl.add_argument("--config", help="pipeline config file")
    evl.add_argument("--events", required=True, help="counted events file (frame marker)")
    evl.set_defaults(func=_cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        overrides = _parse_overrides(rest)
        return args.func(args, overrides)
    except UsageError as exc:
        print(f"roadcount: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, PgmError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"roadcount: data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
