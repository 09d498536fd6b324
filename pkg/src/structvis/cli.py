"""``structvis`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 input/schema error, 2 external service failure,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import captions as cap
from .overlay import RgbImage, draw_overlay, overlay_path, read_ppm, write_ppm
from .pose import PoseConfig, load_pose, render_pose
from .projector import ProjectorConfig, grad_check, init_projector
from .qa import ModalityFlags, assemble_prompt, load_items, parse_choice, read_jsonl, score
from .serialize import (
    SerializationConfig,
    TokenCostModel,
    TokenizerError,
    config_dict,
    read_script_records,
    serialize_video,
    write_script_records,
)
from .tracking import SchemaError, build_tracks, load_detections, load_trackset, trackset_to_doc

logger = logging.getLogger("structvis")

CONFIG_SCHEMA = "structvis/config/v1"
EXIT_OK, EXIT_INPUT, EXIT_SERVICE, EXIT_INTERNAL = 0, 1, 2, 3
GRADCHECK_TOL = 1e-5


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


@dataclass
class Paths:
    detections_dir: str = "detections"
    tracks_dir: str = "tracks"
    scripts_file: str = "scripts/box_scripts.jsonl"
    pose_input: str = "poses"
    pose_file: str = "scripts/pose_scripts.jsonl"
    qa_file: str = "qa.jsonl"
    prompts_file: str = "prompts.jsonl"
    predictions_file: str = "predictions.jsonl"
    report_file: str = "report.json"
    cache_file: str = "captions.jsonl"
    frames_dir: str = "frames"
    overlay_dir: str = "overlays"


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    serialization: SerializationConfig = field(default_factory=SerializationConfig)
    pose: PoseConfig = field(default_factory=PoseConfig)
    projector: ProjectorConfig = field(default_factory=lambda: ProjectorConfig(embed_dim=8))
    endpoint: cap.EndpointConfig = field(default_factory=cap.EndpointConfig)
    tokenizer: TokenCostModel = field(default_factory=TokenCostModel)
    detection_threshold: float = 0.0
    caption_preset: str = "standard"
    max_in_flight: int = 4
    overlay_thickness: int = 3

    def __post_init__(self):
        if not 0.0 <= self.detection_threshold <= 1.0:
            raise ValueError(f"detection_threshold must lie in [0, 1], got {self.detection_threshold}")
        cap.Preset(self.caption_preset)
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.overlay_thickness < 1:
            raise ValueError("overlay_thickness must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        doc = dict(doc)
        schema = doc.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ValueError(f"expected config schema {CONFIG_SCHEMA!r}, got {schema!r}")
        nested = {
            "paths": Paths,
            "serialization": SerializationConfig,
            "pose": PoseConfig,
            "projector": ProjectorConfig,
            "endpoint": cap.EndpointConfig,
            "tokenizer": TokenCostModel,
        }
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in doc.items():
            if key in nested:
                sub = nested[key]
                sub_known = {f.name for f in dataclasses.fields(sub)}
                bad = set(value) - sub_known
                if bad:
                    raise ValueError(f"unknown keys in {key!r}: {sorted(bad)}")
                defaults = {"embed_dim": 8} if key == "projector" else {}
                kwargs[key] = sub(**{**defaults, **value})
            else:
                kwargs[key] = value
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {"schema": CONFIG_SCHEMA, **dataclasses.asdict(self)}


def load_config(path: Optional[str]) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return PipelineConfig.from_dict(doc)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}:{exc.lineno}: {exc.msg}") from None
    except (TypeError, ValueError) as exc:
        raise CliError(f"{path}: {exc}") from None


def _override(obj, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    return dataclasses.replace(obj, **changes) if changes else obj


def _pmap(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _write_lines(path: Path, header: dict, records):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


# -- track ------------------------------------------------------------------


def _track_one(job):
    path, out_dir, threshold = job
    try:
        meta, observations = load_detections(path)
        ts = build_tracks(observations, threshold, **meta)
    except SchemaError as exc:
        return str(exc)
    except KeyError as exc:
        return f"{path}: {exc.args[0]}"
    except ValueError as exc:
        return f"{path}: {exc}"
    doc = trackset_to_doc(ts, settings={"detection_threshold": threshold})
    out = Path(out_dir) / f"{ts.video_id}.json"
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return None


def cmd_track(cfg: PipelineConfig, args) -> int:
    in_dir = Path(args.input or cfg.paths.detections_dir)
    out_dir = Path(args.output or cfg.paths.tracks_dir)
    threshold = cfg.detection_threshold if args.threshold is None else args.threshold
    if not 0.0 <= threshold <= 1.0:
        raise CliError(f"--threshold must lie in [0, 1], got {threshold}")
    if not in_dir.is_dir():
        raise CliError(f"detections directory {in_dir} does not exist")
    files = sorted(in_dir.glob("*.json"))
    if not files:
        logger.warning("no detection files in %s", in_dir)
        return EXIT_OK
    out_dir.mkdir(parents=True, exist_ok=True)
    errors = [e for e in _pmap(_track_one, [(f, out_dir, threshold) for f in files], args.jobs) if e]
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    return EXIT_INPUT if errors else EXIT_OK


# -- serialize --------------------------------------------------------------


def _serialize_one(job):
    path, scfg, model = job
    ts = load_trackset(path)
    return serialize_video(ts, scfg, model).to_record(ts.video_id)


def cmd_serialize(cfg: PipelineConfig, args) -> int:
    scfg = _override(
        cfg.serialization,
        token_budget=args.budget,
        quant_scale=args.quant_scale,
        fixed_stride=args.fixed_stride,
        labels_only=True if args.labels_only else None,
    )
    model = TokenCostModel("external", args.tokenizer_cmd) if args.tokenizer_cmd else cfg.tokenizer
    in_dir = Path(args.input or cfg.paths.tracks_dir)
    out = Path(args.output or cfg.paths.scripts_file)
    files = sorted(in_dir.glob("*.json")) if in_dir.is_dir() else []
    if not files:
        logger.warning("no track files in %s", in_dir)
    try:
        records = _pmap(_serialize_one, [(f, scfg, model) for f in files], args.jobs)
    except SchemaError as exc:
        raise CliError(str(exc)) from None
    except TokenizerError as exc:
        raise CliError(str(exc), EXIT_SERVICE) from None
    records.sort(key=lambda r: r["video_id"])
    header = {"schema": "structvis/scripts/v1", "settings": config_dict(scfg, model)}
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        write_script_records(fh, records, header["settings"])
    over = sum(r["over_budget"] for r in records)
    if over:
        logger.warning("%d of %d videos exceed the token budget at maximal stride", over, len(records))
    return EXIT_OK


# -- pose -------------------------------------------------------------------


def _pose_one(job):
    path, pcfg = job
    seq = load_pose(path)
    return {"sequence_id": seq.sequence_id, "text": render_pose(seq, pcfg)}


def cmd_pose(cfg: PipelineConfig, args) -> int:
    pcfg = _override(cfg.pose, n_frames=args.n_frames, half_range=args.half_range, quant_scale=args.quant_scale)
    src = Path(args.input or cfg.paths.pose_input)
    files = sorted(src.glob("*.json")) if src.is_dir() else [src]
    if not src.exists():
        raise CliError(f"pose input {src} does not exist")
    try:
        records = _pmap(_pose_one, [(f, pcfg) for f in files], args.jobs)
    except (ValueError, json.JSONDecodeError) as exc:
        raise CliError(str(exc)) from None
    records.sort(key=lambda r: r["sequence_id"])
    header = {"schema": "structvis/pose-scripts/v1", "settings": dataclasses.asdict(pcfg)}
    _write_lines(Path(args.output or cfg.paths.pose_file), header, records)
    return EXIT_OK


# -- assemble ---------------------------------------------------------------


def _parse_modalities(text: str) -> ModalityFlags:
    names = {m.strip() for m in text.split(",") if m.strip()}
    unknown = names - {"video", "caption", "box"}
    if unknown:
        raise CliError(f"unknown modalities: {sorted(unknown)}")
    try:
        return ModalityFlags(video="video" in names, caption="caption" in names, box="box" in names)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _captions_by_video(cache: cap.CaptionCache, preset: str, model: str) -> dict:
    out = {}
    for (vid, frame, p, m), caption in sorted(cache.items()):
        if p == preset and m == model:
            out.setdefault(vid, []).append(caption)
    return out


def cmd_assemble(cfg: PipelineConfig, args) -> int:
    flags = _parse_modalities(args.modalities)
    try:
        items = load_items(args.qa or cfg.paths.qa_file)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from None
    scripts = {}
    if flags.box:
        path = Path(args.scripts or cfg.paths.scripts_file)
        try:
            with open(path, encoding="utf-8") as fh:
                scripts = read_script_records(fh)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"{path}: {exc}") from None
    caps = {}
    if flags.caption:
        try:
            cache = cap.CaptionCache(args.cache or cfg.paths.cache_file)
        except ValueError as exc:
            raise CliError(str(exc)) from None
        caps = _captions_by_video(cache, cfg.caption_preset, cfg.endpoint.model)
    records, failed = [], 0
    for n, item in enumerate(items):
        script = scripts[item.video_id]["text"] if item.video_id in scripts else None
        try:
            prompt = assemble_prompt(item, flags, caps.get(item.video_id), script)
        except ValueError as exc:
            print(f"error: item {n}: {exc}", file=sys.stderr)
            failed += 1
            continue
        records.append({"index": n, "video_id": item.video_id, "prompt": prompt})
    header = {
        "schema": "structvis/prompts/v1",
        "settings": {"modalities": dataclasses.asdict(flags), "caption_preset": cfg.caption_preset},
    }
    _write_lines(Path(args.output or cfg.paths.prompts_file), header, records)
    return EXIT_INPUT if failed else EXIT_OK


# -- score ------------------------------------------------------------------


def cmd_score(cfg: PipelineConfig, args) -> int:
    try:
        items = load_items(args.qa or cfg.paths.qa_file)
        preds = read_jsonl(args.predictions or cfg.paths.predictions_file)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from None
    if len(preds) != len(items):
        raise CliError(f"{len(items)} QA items but {len(preds)} predictions")
    choices = []
    for n, (item, pred) in enumerate(zip(items, preds), 1):
        if not isinstance(pred, dict):
            raise CliError(f"prediction {n}: expected an object, got {type(pred).__name__}")
        if pred.get("video_id") != item.video_id:
            raise CliError(f"prediction {n}: video_id {pred.get('video_id')!r} != {item.video_id!r}")
        choices.append(parse_choice(str(pred.get("raw_output", "")), item.options))
    report = score(items, choices)
    doc = {"schema": "structvis/report/v1", **report.to_dict()}
    out = Path(args.output or cfg.paths.report_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"accuracy {report.accuracy:.4f} ({report.correct}/{report.total}), parse failures {report.parse_failures}")
    return EXIT_OK


# -- captions ---------------------------------------------------------------

_IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".ppm")


def _frame_files(frames_dir: Path):
    for video_dir in sorted(p for p in frames_dir.iterdir() if p.is_dir()):
        frames = []
        for f in video_dir.iterdir():
            if f.suffix.lower() in _IMAGE_SUFFIXES and f.stem.startswith("frame_"):
                try:
                    frames.append((int(f.stem[len("frame_") :]), f))
                except ValueError:
                    continue
        yield video_dir.name, sorted(frames)


def cmd_captions(cfg: PipelineConfig, args) -> int:
    endpoint = _override(cfg.endpoint, base_url=args.base_url, model=args.model)
    preset = args.preset or cfg.caption_preset
    max_in_flight = args.max_in_flight or cfg.max_in_flight
    frames_dir = Path(args.frames or cfg.paths.frames_dir)
    if not frames_dir.is_dir():
        raise CliError(f"frames directory {frames_dir} does not exist")
    try:
        cache = cap.CaptionCache(args.cache or cfg.paths.cache_file)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    failed = 0
    for video_id, frames in _frame_files(frames_dir):
        reqs = [cap.CaptionRequest(video_id, idx, f.read_bytes(), preset, endpoint.model) for idx, f in frames]
        try:
            cap.caption_video(reqs, cache, max_in_flight, endpoint)
        except cap.CaptionBatchError as exc:
            for err in exc.failures.values():
                print(f"error: {err}", file=sys.stderr)
            failed += len(exc.failures)
    return EXIT_SERVICE if failed else EXIT_OK


# -- overlay ----------------------------------------------------------------


def _overlay_one(job):
    path, frames_dir, out_dir, thickness = job
    ts = load_trackset(path)
    written = 0
    for frame in ts.keyframes:
        boxes = [(t.id, b) for t in ts.tracks for f, b in t.observations if f == frame]
        src = Path(frames_dir) / ts.video_id / f"frame_{frame.index}.ppm"
        if src.exists():
            img = read_ppm(src.read_bytes())
        else:
            img = RgbImage.blank(int(round(ts.width)), int(round(ts.height)))
        out = overlay_path(out_dir, ts.video_id, frame.index)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_bytes(write_ppm(draw_overlay(img, boxes, thickness)))
        written += 1
    return written


def cmd_overlay(cfg: PipelineConfig, args) -> int:
    in_dir = Path(args.tracks or cfg.paths.tracks_dir)
    files = sorted(in_dir.glob("*.json")) if in_dir.is_dir() else []
    if not files:
        logger.warning("no track files in %s", in_dir)
    thickness = args.thickness or cfg.overlay_thickness
    jobs = [(f, args.frames or cfg.paths.frames_dir, args.output or cfg.paths.overlay_dir, thickness) for f in files]
    try:
        _pmap(_overlay_one, jobs, args.jobs)
    except (SchemaError, ValueError) as exc:
        raise CliError(str(exc)) from None
    return EXIT_OK


# -- gradcheck --------------------------------------------------------------


def cmd_gradcheck(cfg: PipelineConfig, args) -> int:
    base = _override(cfg.projector, embed_dim=args.embed_dim)
    layers = [args.layers] if args.layers else [1, 2, 3]
    tokens = [args.tokens] if args.tokens else [1, 9]
    inits = [args.init] if args.init else ["zero", "uniform"]
    worst = 0.0
    for n_layers in layers:
        for tpb in tokens:
            for init in inits:
                pcfg = dataclasses.replace(base, n_layers=n_layers, tokens_per_box=tpb, init=init)
                err = grad_check(init_projector(pcfg, seed=args.seed), seed=args.seed)
                worst = max(worst, err)
                print(f"layers={n_layers} tokens={tpb} init={init} max_rel_err={err:.3e}")
    if worst < GRADCHECK_TOL:
        print(f"PASS max_rel_err < 1e-5 (observed {worst:.3e})")
        return EXIT_OK
    print(f"FAIL max_rel_err {worst:.3e} >= 1e-5")
    return EXIT_INTERNAL


# -- parser -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    def global_flags(parser, suppress):
        dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        parser.add_argument("--config", metavar="PATH", default=dflt(None), help="pipeline config (JSON)")
        parser.add_argument("--jobs", type=int, default=dflt(os.cpu_count() or 1), help="worker pool size")
        parser.add_argument("--seed", type=int, default=dflt(0), help="random seed for projector initialization")
        parser.add_argument("-v", "--verbose", action="store_true", default=dflt(False), help="debug logging")

    # given before or after the subcommand; subparser copies must not reset the values
    common = _Parser(add_help=False)
    global_flags(common, suppress=True)
    parser = _Parser(prog="structvis", description=__doc__.splitlines()[0])
    global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("track", parents=[common], help="build tracks from detection files")
    p.add_argument("--input", metavar="DIR", help="directory of detection JSON files")
    p.add_argument("--output", metavar="DIR", help="directory for track files")
    p.add_argument("--threshold", type=float, help="detection score threshold")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("serialize", parents=[common], help="render budgeted box scripts")
    p.add_argument("--input", metavar="DIR", help="directory of track files")
    p.add_argument("--output", metavar="FILE", help="script dataset (JSON lines)")
    p.add_argument("--budget", type=int, help="strict token budget per video")
    p.add_argument("--fixed-stride", type=int, help="skip the stride search and keep every k-th keyframe")
    p.add_argument("--quant-scale", type=int, help="box quantization scale")
    p.add_argument("--labels-only", action="store_true", help="omit box coordinates, keep labels and timestamps")
    p.add_argument("--tokenizer-cmd", metavar="CMD", help="external tokenizer command")
    p.set_defaults(func=cmd_serialize)

    p = sub.add_parser("pose", parents=[common], help="render pose sequences as text")
    p.add_argument("--input", metavar="PATH", help="pose file or directory of pose files")
    p.add_argument("--output", metavar="FILE", help="pose script dataset (JSON lines)")
    p.add_argument("--n-frames", type=int, help="frames sampled per sequence")
    p.add_argument("--half-range", type=float, help="metres mapped to half the quantization range")
    p.add_argument("--quant-scale", type=int, help="pose quantization scale")
    p.set_defaults(func=cmd_pose)

    p = sub.add_parser("assemble", parents=[common], help="assemble QA prompts")
    p.add_argument("--qa", metavar="FILE", help="QA items (JSON lines)")
    p.add_argument("--scripts", metavar="FILE", help="box script dataset")
    p.add_argument("--cache", metavar="FILE", help="caption cache")
    p.add_argument("--output", metavar="FILE", help="prompt file (JSON lines)")
    p.add_argument("--modalities", default="box", help="comma list of video,caption,box")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("score", parents=[common], help="score multiple-choice predictions")
    p.add_argument("--qa", metavar="FILE", help="QA items (JSON lines)")
    p.add_argument("--predictions", metavar="FILE", help="raw model outputs (JSON lines)")
    p.add_argument("--output", metavar="FILE", help="report file (JSON)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("captions", parents=[common], help="fetch frame captions into the cache")
    p.add_argument("--frames", metavar="DIR", help="frames laid out as DIR/<video_id>/frame_<index>.<ext>")
    p.add_argument("--cache", metavar="FILE", help="caption cache")
    p.add_argument("--preset", choices=[x.value for x in cap.Preset], help="caption prompt preset")
    p.add_argument("--max-in-flight", type=int, help="concurrent requests")
    p.add_argument("--base-url", help="chat-completions base URL")
    p.add_argument("--model", help="model name sent to the endpoint")
    p.set_defaults(func=cmd_captions)

    p = sub.add_parser("overlay", parents=[common], help="draw tracked boxes onto frames")
    p.add_argument("--tracks", metavar="DIR", help="directory of track files")
    p.add_argument("--frames", metavar="DIR", help="source PPM frames; blank canvas where missing")
    p.add_argument("--output", metavar="DIR", help="overlay output directory")
    p.add_argument("--thickness", type=int, help="border thickness in pixels")
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the box projector")
    p.add_argument("--layers", type=int, choices=[1, 2, 3], help="check only this depth")
    p.add_argument("--tokens", type=int, choices=[1, 9], help="check only this tokens-per-box")
    p.add_argument("--init", choices=["zero", "uniform"], help="check only this initialization")
    p.add_argument("--embed-dim", type=int, help="embedding width")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _setup_logging(verbose: bool):
    # bound to the package logger so warnings reach stderr whatever the root config is
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    logger.handlers[:] = [handler]
    logger.setLevel(logging.DEBUG if verbose else logging.WARNING)
    logger.propagate = False


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        cfg = load_config(args.config)
        return args.func(cfg, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
