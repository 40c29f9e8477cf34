"""Command line front end.

Subcommands cover the whole workflow: simulate a labeled stream, replay
it against thresholds, sweep a threshold grid into a tradeoff table and
figure, detect a pupil in a single image, and serve the live annotation
queue. Every run is reproducible from the config files alone; nothing
reads clocks, hostnames or environment variables.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .evaluation import SweepSpec, replay_metrics, sweep
from .journal import JournalError
from .pipeline import AnnotationAborted, PipelineError, PipelineParams
from .providers import RecordFormatError, SimConfig, parse_records, serialize_records
from .pupil import NoPupilError, PupilFormatError, extract_pupil, parse_polygon, read_pgm
from .report import run_figure, tradeoff_figure
from .service import AnnotationService, make_server


class CliError(Exception):
    """A user-facing failure; the message is printed without a traceback."""


def _load_json(path: str, kind: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as err:
        raise CliError(f"cannot read {kind} file: {err}") from None
    except json.JSONDecodeError as err:
        raise CliError(f"{path}: not valid JSON: {err}") from None
    if not isinstance(data, dict):
        raise CliError(f"{path}: expected a JSON object")
    return data


def load_sim_config(path: str) -> SimConfig:
    return _sim_config_from_dict(_load_json(path, "config"), path)


def load_params(path: str) -> PipelineParams:
    try:
        return PipelineParams.from_dict(_load_json(path, "params"))
    except ValueError as err:
        raise CliError(f"{path}: {err}") from None


def load_sweep_spec(path: str) -> SweepSpec:
    data = _load_json(path, "sweep spec")
    fields = {f.name for f in dataclasses.fields(SweepSpec)}
    unknown = sorted(set(data) - fields)
    if unknown:
        raise CliError(f"{path}: unknown sweep keys {unknown}")
    if "config" in data and data["config"] is not None:
        data["config"] = _sim_config_from_dict(dict(data["config"]), path)
    if "records" in data and data["records"] is not None:
        data["records"] = load_records(str(Path(path).parent / data["records"]))
    for key in ("delta_grid", "c_min_grid", "v_u_min_grid"):
        if key in data:
            data[key] = tuple(data[key])
    try:
        return SweepSpec(**data)
    except (TypeError, ValueError) as err:
        raise CliError(f"{path}: {err}") from None


def _sim_config_from_dict(data: dict, origin: str) -> SimConfig:
    fields = {f.name for f in dataclasses.fields(SimConfig)}
    unknown = sorted(set(data) - fields)
    if unknown:
        raise CliError(f"{origin}: unknown config keys {unknown}")
    for key in ("states", "confident_ratio_range", "unconfident_ratio_range"):
        if key in data:
            data[key] = tuple(data[key])
    for key in ("true_transitions", "emission"):
        if data.get(key) is not None:
            data[key] = np.asarray(data[key], dtype=np.float64)
    try:
        return SimConfig(**data)
    except (TypeError, ValueError) as err:
        raise CliError(f"{origin}: {err}") from None


def load_records(path: str):
    try:
        return parse_records(Path(path).read_text())
    except OSError as err:
        raise CliError(f"cannot read records file: {err}") from None
    except RecordFormatError as err:
        raise CliError(f"{path}: {err}") from None


def cmd_simulate(args: argparse.Namespace) -> int:
    from .providers import simulate_records

    config = load_sim_config(args.config)
    stream = simulate_records(config)
    Path(args.out).write_text(serialize_records(stream))
    print(f"wrote {len(stream)} records to {args.out}")
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    records = load_records(args.records)
    params = load_params(args.params)
    try:
        point = replay_metrics(records, None, params, seed_frames=args.seed_frames)
    except (PipelineError, AnnotationAborted, ValueError) as err:
        raise CliError(str(err)) from None
    Path(args.out).write_text(json.dumps(point.to_dict(), indent=2, sort_keys=True) + "\n")
    if args.plot:
        figure_path = str(Path(args.out).with_suffix(".png"))
        run_figure(point, figure_path)
        print(f"wrote {args.out} and {figure_path}")
    else:
        print(f"wrote {args.out}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    spec = load_sweep_spec(args.spec)
    result = sweep(spec)
    for failure in result.failures:
        print(
            f"warning: delta_min={failure.delta_min:g} c_min={failure.c_min:g}"
            f" v_u_min={failure.v_u_min:g} failed: {failure.message}",
            file=sys.stderr,
        )
    if not result.points:
        raise CliError("every grid point failed")
    Path(args.out).write_text(result.to_csv())
    written = [args.out]
    if not args.no_plot:
        figure_path = str(Path(args.out).with_suffix(".png"))
        tradeoff_figure(result, figure_path)
        written.append(figure_path)
    print(f"wrote {' and '.join(written)}")
    return 0


def cmd_pupil_detect(args: argparse.Namespace) -> int:
    try:
        image = read_pgm(args.image)
        polygon = parse_polygon(Path(args.polygon).read_text())
    except OSError as err:
        raise CliError(f"cannot read input: {err}") from None
    except PupilFormatError as err:
        raise CliError(str(err)) from None
    try:
        result = extract_pupil(image, polygon)
    except NoPupilError:
        print("no-pupil")
        return 0
    except ValueError as err:
        raise CliError(str(err)) from None
    x, y = result.center
    print(f"{x:g} {y:g} {result.blob_area}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    records = load_records(args.records)
    params = load_params(args.params)
    journal = args.journal if args.journal is not None else args.records + ".journal"
    try:
        service = AnnotationService(
            records,
            params,
            journal_path=journal,
            images_dir=args.images,
            seed_frames=args.seed_frames,
        )
    except JournalError as err:
        raise CliError(str(err)) from None
    server = make_server(service, args.port, args.host)
    host, port = server.server_address[:2]
    print(f"serving annotation queue on http://{host}:{port} (journal: {journal})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        service.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqannot",
        description="Semi-automated annotation of discrete-state frame sequences.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic record stream")
    p.add_argument("--config", required=True, help="simulation config (JSON)")
    p.add_argument("--out", required=True, help="records file to write")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replay", help="replay a stream with the oracle annotator")
    p.add_argument("--records", required=True, help="records file (with ground truth)")
    p.add_argument("--params", required=True, help="pipeline parameters (JSON)")
    p.add_argument("--out", required=True, help="metrics file to write (JSON)")
    p.add_argument("--seed-frames", type=int, default=20000, help="seeding budget")
    p.add_argument("--plot", action="store_true", help="also render a summary figure")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("sweep", help="sweep a threshold grid into a tradeoff table")
    p.add_argument("--spec", required=True, help="sweep spec (JSON)")
    p.add_argument("--out", required=True, help="tradeoff table to write (CSV)")
    p.add_argument(
        "--no-plot", action="store_true", help="skip the tradeoff figure PNG"
    )
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pupil-detect", help="locate the pupil in one eye image")
    p.add_argument("image", help="8-bit binary PGM image")
    p.add_argument("--polygon", required=True, help="eye region vertices, one x,y per line")
    p.set_defaults(func=cmd_pupil_detect)

    p = sub.add_parser("serve", help="serve the live annotation queue over HTTP")
    p.add_argument("--records", required=True, help="records file")
    p.add_argument("--params", required=True, help="pipeline parameters (JSON)")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--images", help="directory of per-frame images", default=None)
    p.add_argument("--journal", help="journal path (default: <records>.journal)")
    p.add_argument("--seed-frames", type=int, default=20000, help="seeding budget")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
