"""Command-line entry point wiring the library into batch workflows.

Commands mirror the production pipeline: authority setup and key issuance,
synthetic dataset generation, head-trace conversion, dataset packaging
(selective encryption plus MPDs and a size manifest), simulation sweeps, and
report aggregation.  Every command validates its flags before touching the
filesystem, writes through temp-then-rename so failures leave no partial
outputs, and exits nonzero on any error.  All randomness comes from explicit
--seed flags.
"""

from __future__ import annotations

import argparse
import csv
import glob as globlib
import hashlib
import io
import json
import os
import sys
import tempfile
from pathlib import Path

from . import abekit, bitstream, selenc, viewport
from .selenc import EncryptionLevel, SchemeId, TileRole, level_for
from .simnet import (ConfigError, CostModel, Mode, SimConfig, TopologyKind,
                     Workload, run)
from .simnet.dataset import (DatasetSpec, ManifestSizes, MANIFEST_HEADER,
                             make_trace, manifest_rows_to_csv, parse_manifest)
from .simnet.report import aggregate, parse_metrics_csv

LEVEL_FLAGS = {"none": EncryptionLevel.NONE, "allI": EncryptionLevel.ALL_I,
               "allI+P": EncryptionLevel.ALL_IP, "full": EncryptionLevel.FULL}
SCHEME_FLAGS = {s.value: s for s in SchemeId}
MODE_FLAGS = {m.value: m for m in Mode}
TOPOLOGY_FLAGS = {t.value: t for t in TopologyKind}


class CliError(Exception):
    pass


def _write_file(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_text(path: Path, text: str) -> None:
    _write_file(path, text.encode())


def _read_file(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from exc


class _StagedDir:
    """All-or-nothing directory output: build under a temp name, then rename."""

    def __init__(self, target: Path):
        self.target = target
        if target.exists():
            raise CliError(f"output directory {target} already exists")
        target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(dir=target.parent,
                                         prefix=target.name + ".tmp."))

    def write(self, name: str, data) -> None:
        path = self.tmp / name
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(data, str):
            data = data.encode()
        path.write_bytes(data)

    def commit(self) -> None:
        os.replace(self.tmp, self.target)

    def abort(self) -> None:
        import shutil
        shutil.rmtree(self.tmp, ignore_errors=True)


# ---------------------------------------------------------------------------
# key management commands

def cmd_setup(args) -> int:
    seed = _read_file(Path(args.seed_file))
    if len(seed) != 32:
        raise CliError(f"seed file must hold exactly 32 bytes, got {len(seed)}")
    mk, pp = abekit.setup(seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_file(out / "master.key", abekit.master_key_to_bytes(mk))
    _write_file(out / "public.params", pp.to_bytes())
    print(f"wrote {out / 'master.key'} and {out / 'public.params'}")
    return 0


def cmd_keygen(args) -> int:
    mk = abekit.master_key_from_bytes(_read_file(Path(args.master)))
    attrs = [a for a in args.attrs.split(",") if a]
    sk = abekit.keygen(mk, args.user, attrs)
    _write_file(Path(args.out), sk.to_bytes())
    print(f"wrote {args.out} ({len(attrs)} attribute(s))")
    return 0


def _load_authority(args):
    mk = abekit.master_key_from_bytes(_read_file(Path(args.master)))
    pp = abekit.PublicParams.from_bytes(_read_file(Path(args.pub)))
    return mk, pp


def cmd_encrypt_seg(args) -> int:
    mk, pp = _load_authority(args)
    policy = abekit.policy_from_text(args.policy)
    data = _read_file(Path(args.infile))
    enc = selenc.encrypt_segment(data, LEVEL_FLAGS[args.level], policy, pp, mk,
                                 rng_seed=args.seed)
    _write_file(Path(args.out), enc.bytes)
    encrypted = sum(1 for _i, _t, hit in enc.frame_map if hit)
    print(f"wrote {args.out}: {encrypted}/{len(enc.frame_map)} frames encrypted, "
          f"overhead {selenc.size_overhead(data, enc):.4%}")
    return 0


def cmd_decrypt_seg(args) -> int:
    sk = abekit.PrivateKey.from_bytes(_read_file(Path(args.key)))
    data = _read_file(Path(args.infile))
    _write_file(Path(args.out), selenc.decrypt_segment(data, sk))
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# dataset commands

def cmd_synth(args) -> int:
    if args.config:
        spec = bitstream.parse_synth_config(Path(args.config).read_text())
        _write_file(Path(args.out), bitstream.synth_segment(**spec))
        print(f"wrote {args.out}")
        return 0
    # dataset mode: a tiled, multi-quality, multi-video tree of plain segments
    qualities = DatasetSpec().qualities[:args.qualities]
    staged = _StagedDir(Path(args.out))
    try:
        n_frames = round(30 * args.segment_duration)
        count = 0
        for v in range(args.videos):
            for tile in range(1, args.tiles + 1):
                for q in qualities:
                    total = int(q.tile_bitrate_bps * args.segment_duration / 8)
                    sizes = _frame_size_split(total, n_frames, gop=60)
                    for seg in range(args.segments):
                        seed = int.from_bytes(hashlib.sha256(
                            f"{args.seed}:{v}:{tile}:{q.index}:{seg}".encode()
                        ).digest()[:4], "little")
                        data = bitstream.synth_segment(
                            fps=30, duration_s=args.segment_duration, gop_len=60,
                            size_seed=seed, frame_sizes=sizes)
                        name = viewport.tile_url(f"v{v}", tile, seg, q.index,
                                                 EncryptionLevel.NONE)
                        staged.write(name, data)
                        count += 1
        staged.commit()
    except BaseException:
        staged.abort()
        raise
    print(f"wrote {count} segments to {args.out}")
    return 0


def _frame_size_split(total: int, n_frames: int, gop: int,
                      i_weight: float = 10.0) -> list[int]:
    """Per-frame payload sizes matching the closed-form size model: I frames
    i_weight times a P frame, summing to ``total`` (minus NAL framing)."""
    framing = 4 * n_frames  # length prefixes are part of the tile bytes
    body = max(n_frames * 8, total - framing)
    n_i = max(1, round(n_frames / gop))
    weight_total = n_i * i_weight + (n_frames - n_i)
    p_size = body / weight_total
    sizes = []
    for i in range(n_frames):
        sizes.append(int(p_size * i_weight) if i % gop == 0 else int(p_size))
    sizes[-1] += body - sum(sizes)  # absorb rounding in the last frame
    return sizes


def cmd_trace(args) -> int:
    out = Path(args.out)
    staged = _StagedDir(out)
    try:
        if args.synth:
            traces = [make_trace(t, args.duration, seed=args.seed)
                      for t in range(args.synth)]
            names = [f"trace{t:02d}" for t in range(args.synth)]
            for name, samples in zip(names, traces):
                staged.write(f"{name}.csv", viewport.headtrace_text(samples))
        else:
            paths = sorted(Path(args.traces).glob("*.csv")) if Path(args.traces).is_dir() \
                else [Path(args.traces)]
            if not paths:
                raise CliError(f"no trace CSVs under {args.traces}")
            traces = [viewport.parse_headtrace(p.read_text()) for p in paths]
            names = [p.stem for p in paths]
        for name, samples in zip(names, traces):
            sels = viewport.per_segment_selection(
                samples, args.segment_duration,
                video_duration_s=args.duration)
            staged.write(f"selections_{name}.csv", viewport.selections_to_csv(sels))
        staged.commit()
    except BaseException:
        staged.abort()
        raise
    print(f"wrote {len(traces)} selection file(s) to {out}")
    return 0


def cmd_pack(args) -> int:
    mk, pp = _load_authority(args)
    policy = abekit.policy_from_text(args.policy)
    scheme = SCHEME_FLAGS[args.scheme]
    dataset_dir = Path(args.dataset)
    files = sorted(dataset_dir.glob("*.m4s"))
    if not files:
        raise CliError(f"no .m4s segments under {dataset_dir}")
    sel_paths = sorted(Path(args.selections).glob("selections_*.csv"))
    if not sel_paths:
        raise CliError(f"no selections_*.csv under {args.selections}")
    selections = [viewport.selections_from_csv(p.read_text()) for p in sel_paths]

    catalog = {}  # (video, tile, seg, q) -> path
    videos = set()
    for path in files:
        video, tile, seg, q = _parse_segment_name(path.name)
        videos.add(video)
        catalog[(video, tile, seg, q)] = path
    videos = sorted(videos)
    qualities = sorted({k[3] for k in catalog})
    n_segments = len(selections[0])

    # per (tile, segment): the set of levels any trace's role assigns it
    levels_needed: dict[tuple[int, int], set[EncryptionLevel]] = {}
    if scheme.viewport_aware:
        for sels in selections:
            for sel in sels:
                for tile in sel.tiles:
                    level = level_for(scheme, sel.role_of(tile))
                    levels_needed.setdefault((tile, sel.segment_index), set()).add(level)
    uniform_level = None if scheme.viewport_aware else level_for(scheme, TileRole.MAJOR)

    staged = _StagedDir(Path(args.out))
    manifest_rows = []
    try:
        for (video, tile, seg, q), path in sorted(catalog.items()):
            if scheme.viewport_aware:
                levels = levels_needed.get((tile, seg), {EncryptionLevel.NONE})
            else:
                levels = {uniform_level}
            plain = path.read_bytes()
            for level in sorted(levels, key=lambda lv: lv.name):
                seed = hashlib.sha256(
                    f"{args.seed}:{video}:{tile}:{seg}:{q}:{level.name}".encode()
                ).digest()
                enc = selenc.encrypt_segment(plain, level, policy, pp, mk, seed)
                url = viewport.tile_url(video, tile, seg, q, level)
                staged.write(url, enc.bytes)
                stats = selenc.seg_stats(plain)
                enc_frames = sum(1 for _i, _t, hit in enc.frame_map if hit)
                enc_bytes = sum(stats.bytes_of(ft) for ft in level.covered)
                manifest_rows.append({
                    "url": url, "video": video, "tile": tile, "segment": seg,
                    "quality": q, "level": level.name,
                    "plain_bytes": len(plain), "bytes": len(enc.bytes),
                    "enc_frames": enc_frames, "enc_bytes": enc_bytes})
        # adaptation-set bitrates carry the encryption overhead
        adj_bitrate = {}
        for q in qualities:
            sizes = [r["bytes"] for r in manifest_rows if r["quality"] == q]
            adj_bitrate[q] = round(sum(sizes) / len(sizes) * 8 / args.segment_duration)
        mpd_qualities = [viewport.Quality(q, adj_bitrate[q],
                                          _resolution_of(q)) for q in qualities]
        for t, sels in enumerate(selections):
            video = videos[t % len(videos)]
            mpd = viewport.build_mpd(video, sels, mpd_qualities, scheme,
                                     args.segment_duration)
            staged.write(f"mpd_{sel_paths[t].stem.removeprefix('selections_')}.xml",
                         viewport.render_mpd(mpd))
        staged.write("manifest.csv", manifest_rows_to_csv(manifest_rows))
        staged.commit()
    except BaseException:
        staged.abort()
        raise
    print(f"packed {len(manifest_rows)} segment file(s), {len(selections)} MPD(s), "
          f"manifest.csv -> {args.out}")
    return 0


def _parse_segment_name(name: str) -> tuple[str, int, int, int]:
    stem = name[:-len(".m4s")]
    try:
        video, tile_s, seg_s, q_s = stem.split("_")
        return video, int(tile_s.removeprefix("tile")), \
            int(seg_s.removeprefix("seg")), int(q_s.removeprefix("q"))
    except ValueError as exc:
        raise CliError(f"segment name {name!r} is not "
                       "{video}_tile{t}_seg{s}_q{q}.m4s") from exc


def _resolution_of(q: int) -> str:
    table = {qq.index: qq.resolution for qq in DatasetSpec().qualities}
    return table.get(q, "unknown")


# ---------------------------------------------------------------------------
# simulation commands

def _config_runs(doc: dict) -> list[SimConfig]:
    def listify(value):
        return value if isinstance(value, list) else [value]

    cost = CostModel(**doc.get("cost_model", {}))
    workload = Workload(**doc["workload"]) if "workload" in doc else None
    runs = []
    for topology in listify(doc.get("topology", "small")):
        for mode in listify(doc.get("mode", "https")):
            for duration in listify(doc.get("segment_duration_s", 2.0)):
                for cache_mb in listify(doc.get("cache_mb", 500)):
                    for seed in listify(doc.get("seed", 1)):
                        runs.append(SimConfig(
                            topology=TOPOLOGY_FLAGS[topology],
                            mode=MODE_FLAGS[mode],
                            cache_mb=float(cache_mb),
                            segment_duration_s=float(duration),
                            seed=int(seed),
                            cost=cost,
                            workload=workload,
                            origin_bw_bps=doc.get("origin_bw_bps"),
                            buffer_cap_s=float(doc.get("buffer_cap_s", 20.0)),
                            startup_segments=int(doc.get("startup_segments", 2)),
                            collect_request_log=bool(doc.get("collect_request_log",
                                                             False))))
    return runs


def _dataset_from(doc: dict) -> DatasetSpec:
    allowed = {"fps", "gop_frames", "video_duration_s", "i_frame_weight",
               "policy_text", "n_videos", "n_traces", "trace_seed"}
    section = doc.get("dataset", {})
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown dataset key(s): {sorted(unknown)}")
    return DatasetSpec(**section)


def cmd_simulate(args) -> int:
    try:
        doc = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot load config {args.config}: {exc}") from exc
    overrides = {}
    if args.cache_mb is not None:
        overrides["cache_mb"] = args.cache_mb
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.topology is not None:
        overrides["topology"] = args.topology
    if args.segment_duration is not None:
        overrides["segment_duration_s"] = args.segment_duration
    if args.seed is not None:
        overrides["seed"] = args.seed
    doc.update(overrides)
    configs = _config_runs(doc)
    dataset = _dataset_from(doc)
    sizes = None
    if args.manifest:
        sizes = ManifestSizes(parse_manifest(Path(args.manifest).read_text()))
    staged = _StagedDir(Path(args.out))
    try:
        combined = []
        passes_total = 0
        for cfg in configs:
            metrics = run(cfg, dataset, sizes)
            passes_total += metrics.passes
            stem = (f"{cfg.topology.value}_{cfg.mode.value}_"
                    f"c{int(cfg.cache_mb)}_d{int(cfg.segment_duration_s)}_s{cfg.seed}")
            staged.write(f"metrics_{stem}.csv", metrics.to_csv())
            staged.write(f"clients_{stem}.csv", metrics.clients_csv())
            if cfg.collect_request_log:
                staged.write(f"requests_{stem}.csv", metrics.request_log_csv())
            combined.extend(parse_metrics_csv(metrics.to_csv()))
        merged = io.StringIO()
        writer = csv.DictWriter(merged, ["topology", "mode", "cache_mb",
                                         "segment_duration_s", "seed", "passes",
                                         "metric", "value"], lineterminator="\n")
        writer.writeheader()
        for row in combined:
            writer.writerow(row)
        staged.write("metrics_all.csv", merged.getvalue())
        staged.commit()
    except BaseException:
        staged.abort()
        raise
    print(f"{len(configs)} run(s) ({passes_total} simulation passes) -> {args.out}")
    return 0


def cmd_report(args) -> int:
    paths = sorted(globlib.glob(args.inputs))
    if not paths:
        raise CliError(f"no metric CSVs match {args.inputs!r}")
    rows = []
    for path in paths:
        rows.extend(parse_metrics_csv(Path(path).read_text()))
    _write_text(Path(args.out), aggregate(rows))
    print(f"aggregated {len(paths)} file(s) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abedash",
        description="Attribute-gated selective encryption for tiled 360 DASH "
                    "video, with a deterministic delivery simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("setup", help="derive authority keys from a seed file")
    p.add_argument("--seed-file", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_setup)

    p = sub.add_parser("keygen", help="issue a private key for an attribute set")
    p.add_argument("--master", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--attrs", required=True, help="comma-separated attributes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("encrypt-seg", help="selectively encrypt one .m4s segment")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--level", choices=sorted(LEVEL_FLAGS), required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--master", required=True)
    p.add_argument("--pub", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encrypt_seg)

    p = sub.add_parser("decrypt-seg", help="restore an encrypted segment")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decrypt_seg)

    p = sub.add_parser("synth", help="generate a synthetic segment or dataset")
    p.add_argument("--config", help="key=value spec for a single segment")
    p.add_argument("--videos", type=int, default=5)
    p.add_argument("--tiles", type=int, default=9)
    p.add_argument("--qualities", type=int, default=4)
    p.add_argument("--segments", type=int, default=10)
    p.add_argument("--segment-duration", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("trace", help="head traces to per-segment tile selections")
    p.add_argument("--traces", help="trace CSV file or directory")
    p.add_argument("--synth", type=int, help="generate N synthetic traces instead")
    p.add_argument("--duration", type=float, default=293.0)
    p.add_argument("--segment-duration", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=7700)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("pack", help="encrypt a dataset and emit MPDs + manifest")
    p.add_argument("--dataset", required=True)
    p.add_argument("--selections", required=True,
                   help="directory of selections_*.csv files")
    p.add_argument("--scheme", choices=sorted(SCHEME_FLAGS), required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--master", required=True)
    p.add_argument("--pub", required=True)
    p.add_argument("--segment-duration", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("simulate", help="run delivery simulations from a config")
    p.add_argument("--config", required=True, help="JSON run/sweep description")
    p.add_argument("--manifest", help="size manifest from pack (closed-form "
                                      "sizes when omitted)")
    p.add_argument("--cache-mb", type=float)
    p.add_argument("--mode", choices=sorted(MODE_FLAGS))
    p.add_argument("--topology", choices=sorted(TOPOLOGY_FLAGS))
    p.add_argument("--segment-duration", type=float, choices=(2.0, 4.0))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="aggregate metric CSVs into summary tables")
    p.add_argument("--inputs", required=True, help="glob of metrics CSVs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "synth" and not args.config and not args.out:
        parser.error("synth needs --config or dataset flags")
    if args.command == "trace" and not (args.traces or args.synth):
        parser.error("trace needs --traces or --synth N")
    try:
        return args.func(args)
    except (CliError, ConfigError, abekit.AbeError, bitstream.BitstreamError,
            selenc.SelencError, viewport.ViewportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
