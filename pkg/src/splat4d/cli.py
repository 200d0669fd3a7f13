"""Batch pipeline driver.

Usage::

    splat4d <command> [--config PATH] [--set key=value ...]

The config is a flat ``key = value`` file (``#`` comments). When
``--config`` is omitted the path is taken from ``$SPLAT4D_CONFIG``; with
neither, built-in defaults apply. Relative paths resolve against
``work_dir``. Every command writes ``manifests/<command>.manifest`` with the
config hash and a checksum for each artifact it produced.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 validation error.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
import zlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import analysis, postprocess, scoring, synth, temporal_filter
from .errors import FormatError, Splat4DError
from .fileutil import atomic_write_bytes, atomic_write_text, sha256_file
from .raster import encode_frame, encode_ppm, rasterize
from .scene_io import encode_scene, load_scene

CONFIG_ENV = "SPLAT4D_CONFIG"
EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_VALIDATION = 0, 2, 3, 4

COMMANDS = ("generate", "render", "score", "prune", "build-filter", "render-filtered",
            "compress", "analyze", "bench")


class ConfigError(Splat4DError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    work_dir: str = "."
    scene_spec: str = ""
    scene: str = "scene.g4d"
    scores: str = "scores.scores"
    pruned_scene: str = "pruned.g4d"
    masks: str = "masks.g4dm"
    codebook: str = "codebook.g4dc"
    quantized_scene: str = "quantized.g4d"
    frames_dir: str = "frames"
    reports_dir: str = "reports"
    prune_ratio: float = 0.8
    keyframe_interval: int = 20
    visibility_threshold: float = 0.0
    score_mode: str = "time_aligned"
    vq_k: int = 0
    vq_iters: int = 50
    render_width: int = 0
    render_height: int = 0
    timestamps: str = "all"
    views: str = "0"
    background: str = "0 0 0"
    temporal_cull: float = 0.05
    workers: int = 1
    bench_repeats: int = 3
    bench_seeds: int = 5
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.prune_ratio < 1.0):
            raise ConfigError(f"prune_ratio must lie in [0, 1), got {self.prune_ratio}")
        if self.keyframe_interval < 1:
            raise ConfigError("keyframe_interval must be >= 1")
        if self.visibility_threshold < 0:
            raise ConfigError("visibility_threshold must be >= 0")
        if self.score_mode not in scoring.COMBINE_MODES:
            raise ConfigError(f"score_mode must be one of {scoring.COMBINE_MODES}")
        if self.vq_k < 0 or self.vq_iters < 1 or self.workers < 1 or self.bench_repeats < 1 \
                or self.bench_seeds < 1:
            raise ConfigError("vq_k >= 0, vq_iters >= 1, workers >= 1, bench_* >= 1 required")
        for name in ("scene", "pruned_scene", "masks", "codebook", "frames_dir", "reports_dir"):
            if not getattr(self, name):
                raise ConfigError(f"path {name!r} must be nonempty")
        try:
            bg = [float(v) for v in self.background.split()]
        except ValueError:
            raise ConfigError(f"background must be three numbers, got {self.background!r}") from None
        if len(bg) != 3 or min(bg) < 0 or max(bg) > 1:
            raise ConfigError("background must be three numbers in [0, 1]")

    def path(self, name):
        p = Path(getattr(self, name))
        return p if p.is_absolute() else Path(self.work_dir) / p

    @property
    def bg(self):
        return tuple(float(v) for v in self.background.split())

    def canonical_text(self):
        """Config as text, minus ``work_dir`` so relocated runs hash the same."""
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self)
                       if f.name != "work_dir")

    def digest(self):
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


_FIELD_TYPES = {f.name: type(f.default) for f in fields(PipelineConfig)}


def parse_config(text, overrides=(), base_dir=None):
    values = {}
    lines = [(n, raw) for n, raw in enumerate(text.splitlines(), 1)]
    lines += [(f"--set {i + 1}", raw) for i, raw in enumerate(overrides)]
    for lineno, raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        kind = _FIELD_TYPES[key]
        try:
            values[key] = kind(value) if kind is not str else value
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from None
    if base_dir is not None and "work_dir" in values and not Path(values["work_dir"]).is_absolute():
        values["work_dir"] = str(Path(base_dir) / values["work_dir"])
    elif base_dir is not None and "work_dir" not in values:
        values["work_dir"] = str(base_dir)
    return PipelineConfig(**values)


def substream_seed(seed, name):
    """Independent 63-bit seed for a named consumer of the config seed."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


class Run:
    """Collects the artifacts one command writes, then emits its manifest."""

    def __init__(self, command, cfg):
        self.command = command
        self.cfg = cfg
        self.artifacts = []

    def write_bytes(self, path, data):
        atomic_write_bytes(path, data)
        self.artifacts.append(Path(path))

    def write_text(self, path, text):
        atomic_write_text(path, text)
        self.artifacts.append(Path(path))

    def finish(self):
        root = Path(self.cfg.work_dir)
        lines = [f"command = {self.command}", f"config_sha256 = {self.cfg.digest()}"]
        for p in self.artifacts:
            try:
                rel = p.relative_to(root)
            except ValueError:
                rel = p
            lines.append(f"artifact = {rel.as_posix()} {os.path.getsize(p)} {sha256_file(p)}")
        path = root / "manifests" / f"{self.command}.manifest"
        atomic_write_text(path, "\n".join(lines) + "\n")
        return path


def read_manifest(path):
    """Return ``{relative_path: (size, sha256)}`` for each artifact line."""
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.startswith("artifact = "):
            rel, size, digest = line[len("artifact = "):].rsplit(" ", 2)
            out[rel] = (int(size), digest)
    return out


def _spec(cfg):
    if cfg.scene_spec:
        path = cfg.path("scene_spec")
        try:
            spec = synth.parse_spec(path.read_text())
        except (FormatError, ValueError) as exc:
            raise ConfigError(f"scene spec {path}: {exc}") from None
    else:
        spec = synth.DEFAULT_SPEC
    return replace(spec, seed=substream_seed(cfg.seed, "generator"))


def _cameras(cfg):
    spec = _spec(cfg)
    if cfg.render_width or cfg.render_height:
        spec = replace(spec, width=cfg.render_width or spec.width,
                       height=cfg.render_height or spec.height)
    return synth.camera_ring(spec)


def _select(text, count, what):
    if text.strip() == "all":
        return list(range(count))
    try:
        idx = [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{what} must be 'all' or a list of integers") from None
    bad = [i for i in idx if not 0 <= i < count]
    if bad:
        raise ConfigError(f"{what} index out of range: {bad}")
    return idx


def _render_opts(cfg):
    return {"background": cfg.bg, "temporal_cull": cfg.temporal_cull, "workers": cfg.workers}


def _load(cfg, name):
    path = cfg.path(name)
    if not path.exists():
        raise FileNotFoundError(f"{name} file not found: {path}")
    return path


def _write_frames(run, cfg, subdir, scene, render):
    cams = _cameras(cfg)
    views = _select(cfg.views, len(cams), "views")
    times = scene.frame_times()
    frames = _select(cfg.timestamps, len(times), "timestamps")
    out = cfg.path("frames_dir") / subdir
    for v in views:
        for f in frames:
            frame = render(cams[v], times[f])
            stem = out / f"v{v:02d}_f{f:03d}"
            run.write_bytes(stem.with_suffix(".ppm"), encode_ppm(frame))
            run.write_bytes(stem.with_suffix(".frame"), encode_frame(frame))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(run, cfg):
    scene, _ = synth.generate_scene(_spec(cfg))
    run.write_bytes(cfg.path("scene"), encode_scene(scene))


def cmd_render(run, cfg):
    scene = load_scene(_load(cfg, "scene"))
    opts = _render_opts(cfg)
    _write_frames(run, cfg, "full", scene, lambda cam, t: rasterize(scene, cam, t, **opts)[0])


def cmd_score(run, cfg):
    scene = load_scene(_load(cfg, "scene"))
    table = scoring.score_table(scene, _cameras(cfg), mode=cfg.score_mode, **_render_opts(cfg))
    run.write_bytes(cfg.path("scores"), scoring.encode_scores(table))
    run.write_text(cfg.path("reports_dir") / "scores.csv", scoring.scores_csv(table))


def cmd_prune(run, cfg):
    scene = load_scene(_load(cfg, "scene"))
    cols = scoring.decode_scores(_load(cfg, "scores").read_bytes())
    if cols.shape[0] != len(scene):
        raise FormatError(f"scores cover {cols.shape[0]} Gaussians, scene has {len(scene)}")
    pruned, kept = scoring.prune(scene, cols[:, 3], cfg.prune_ratio)
    run.write_bytes(cfg.path("pruned_scene"), encode_scene(pruned))
    lines = ["new_index,old_index"] + [f"{i},{k}" for i, k in enumerate(kept)]
    run.write_text(cfg.path("reports_dir") / "kept.csv", "\n".join(lines) + "\n")


def cmd_build_filter(run, cfg):
    scene = load_scene(_load(cfg, "pruned_scene"))
    times = temporal_filter.select_keyframes(scene.time_extent, scene.frame_count,
                                             min(cfg.keyframe_interval, scene.frame_count))
    masks = temporal_filter.build_masks(scene, _cameras(cfg), times, cfg.visibility_threshold,
                                        **_render_opts(cfg))
    run.write_bytes(cfg.path("masks"), postprocess.pack_masks(masks))


def cmd_render_filtered(run, cfg):
    scene = load_scene(_load(cfg, "pruned_scene"))
    masks = postprocess.unpack_masks(_load(cfg, "masks").read_bytes())
    opts = _render_opts(cfg)
    _write_frames(run, cfg, "filtered", scene,
                  lambda cam, t: temporal_filter.filtered_render(scene, masks, cam, t, **opts))


def cmd_compress(run, cfg):
    raw = load_scene(_load(cfg, "scene"))
    scene = load_scene(_load(cfg, "pruned_scene"))
    masks = postprocess.unpack_masks(_load(cfg, "masks").read_bytes())
    k = cfg.vq_k or postprocess.default_codebook_size(len(scene))
    k = min(k, len(scene))
    _, book = postprocess.quantize_sh(scene, k, seed=substream_seed(cfg.seed, "kmeans"),
                                      max_iters=cfg.vq_iters)
    run.write_bytes(cfg.path("codebook"), postprocess.encode_codebook(book))
    run.write_bytes(cfg.path("quantized_scene"), encode_scene(scene, book.assignments))
    report = postprocess.storage_report(raw, scene, masks, book)
    run.write_text(cfg.path("reports_dir") / "storage.txt", report.to_text())


HIST_EDGES = (0.0, 0.25, 1.0, 4.0, 16.0)


def cmd_analyze(run, cfg):
    scene = load_scene(_load(cfg, "scene"))
    cams = _cameras(cfg)
    times = scene.frame_times()
    reports = cfg.path("reports_dir")
    opts = _render_opts(cfg)
    counts = analysis.sigma_t_histogram(scene, HIST_EDGES)
    run.write_text(reports / "sigma_t_hist.csv",
                   analysis.histogram_csv(counts, HIST_EDGES).to_text())
    act = analysis.active_sets(scene, cams, times, cfg.visibility_threshold, **opts)
    ratio = act.sum(axis=1) / len(scene)
    run.write_text(reports / "active_ratio.csv",
                   analysis.SeriesCSV((("t", times), ("active_ratio", ratio))).to_text())
    ious = np.array([analysis.iou(act[0], row) for row in act])
    run.write_text(reports / "iou.csv", analysis.SeriesCSV((("t", times), ("iou", ious))).to_text())


def cmd_bench(run, cfg):
    from .bench import bench_report

    scene = load_scene(_load(cfg, "scene"))
    pruned = load_scene(_load(cfg, "pruned_scene"))
    masks = postprocess.unpack_masks(_load(cfg, "masks").read_bytes())
    cols = scoring.decode_scores(_load(cfg, "scores").read_bytes())
    text = bench_report(scene, pruned, masks, cols[:, 3], _cameras(cfg), cfg)
    run.write_text(cfg.path("reports_dir") / "bench.txt", text)


HANDLERS = {
    "generate": cmd_generate,
    "render": cmd_render,
    "score": cmd_score,
    "prune": cmd_prune,
    "build-filter": cmd_build_filter,
    "render-filtered": cmd_render_filtered,
    "compress": cmd_compress,
    "analyze": cmd_analyze,
    "bench": cmd_bench,
}


def load_config(config_path=None, overrides=()):
    config_path = config_path or os.environ.get(CONFIG_ENV)
    if config_path:
        path = Path(config_path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return parse_config(text, overrides, base_dir=path.parent)
    return parse_config("", overrides)


def run_command(command, cfg):
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}")
    run = Run(command, cfg)
    HANDLERS[command](run, cfg)
    return run.finish()


def main(argv=None):
    parser = argparse.ArgumentParser(prog="splat4d", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=COMMANDS + ("all",),
                        help="pipeline stage; 'all' runs every stage except bench")
    parser.add_argument("--config", help=f"config file (default: ${CONFIG_ENV})")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config, args.set)
        commands = [c for c in COMMANDS if c != "bench"] if args.command == "all" else [args.command]
        for command in commands:
            start = time.perf_counter()
            manifest = run_command(command, cfg)
            print(f"{command}: ok ({time.perf_counter() - start:.1f}s) -> {manifest}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Splat4DError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
