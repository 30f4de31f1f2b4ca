"""Command-line interface: a thin client of the service API.

Every subcommand talks to the FastAPI app in-process over an ASGI
transport, so no server needs to be running; `driftlearn serve` exposes
the same app over HTTP. Exit codes: 0 success, 1 configuration error,
2 data/I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
import time
from pathlib import Path

import httpx

from .errors import ConfigurationError, DataError, DriftlearnError, NumericalError

_KIND_TO_ERROR = {
    "configuration": ConfigurationError,
    "data": DataError,
    "numerical": NumericalError,
}
_POLL_SECONDS = 0.15


class ServiceClient:
    """Synchronous facade over the in-process ASGI app."""

    def __init__(self, app=None):
        if app is None:
            from .service.app import app as default_app

            app = default_app
        self._app = app

    def call(self, method: str, path: str, json_body=None, params=None) -> dict:
        async def go():
            transport = httpx.ASGITransport(app=self._app)
            async with httpx.AsyncClient(
                transport=transport, base_url="http://driftlearn.internal", timeout=None
            ) as client:
                resp = await client.request(method, path, json=json_body, params=params)
                return resp.status_code, resp.json()

        status_code, body = asyncio.run(go())
        if status_code >= 400:
            raise _error_from_body(status_code, body)
        return body

    def run_job(self, path: str, payload: dict) -> dict:
        submitted = self.call("POST", path, json_body=payload)
        while True:
            status = self.call("GET", f"/jobs/{submitted['job_id']}")
            if status["state"] in ("done", "failed"):
                break
            time.sleep(_POLL_SECONDS)
        if status["state"] == "failed":
            error = status["error"] or {}
            raise _error_from_body(400, error)
        return status["result"]


def _error_from_body(status_code: int, body: dict) -> Exception:
    kind = body.get("kind")
    message = body.get("message", json.dumps(body))
    exc_type = _KIND_TO_ERROR.get(kind)
    if exc_type is not None:
        return exc_type(message)
    if status_code == 422:
        return ConfigurationError(f"invalid request: {json.dumps(body.get('detail', body))}")
    return RuntimeError(f"service error {status_code}: {message}")


def _read_json_file(path: str, what: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{what} file {p} is not valid JSON: {exc}") from exc


def _read_lines(path: str, what: str) -> list[str]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} file not found: {p}")
    return p.read_text().splitlines()


def _pct(value: float) -> str:
    return f"{100.0 * value:.2f}%"


# -- subcommand handlers --------------------------------------------------


def cmd_gen(args, client: ServiceClient) -> int:
    source = _read_json_file(args.spec, "stream spec")
    result = client.call(
        "POST",
        "/streams/generate",
        json_body={"source": source, "seed": args.seed, "out_dir": args.out},
    )
    for warning in result["warnings"]:
        print(f"warning: {warning}", file=sys.stderr)
    print(f"wrote stream to {result['out_dir']}")
    print(f"batches: {result['batches']}")
    print(f"speaker totals: {' '.join(str(n) for n in result['speaker_totals'])}")
    print(f"train utterances: {result['train_utterances']}")
    held = result["heldout_utterances"]
    print(
        "held-out utterances: "
        + ", ".join(f"{name} {held[name]}" for name in ("dev", "test", "warmup", "probe"))
    )
    return 0


def cmd_run(args, client: ServiceClient) -> int:
    payload = {"config": _read_json_file(args.config, "config")}
    if args.seed is not None:
        payload["seed"] = args.seed
    if args.run_dir is not None:
        payload["run_dir"] = args.run_dir
    result = client.run_job("/runs", payload)
    print(f"run {result['method']}/{result['strategy']} seed {result['seed']}")
    print(f"run dir: {result['run_dir']}")
    for b in result["batches"]:
        ci = b["test_ci"]
        print(
            f"batch {b['batch_index']}: dev {_pct(b['dev_wer'])}  "
            f"test {_pct(b['test_wer'])} [{_pct(ci['lo'])}, {_pct(ci['hi'])}]  "
            f"epoch {b['epoch_chosen']}  from batch {b['selected_from_batch']}"
        )
    agg = result["aggregates"]
    print(f"final test WER: {_pct(agg['final_test_wer'])}")
    return 0


def cmd_grid(args, client: ServiceClient) -> int:
    payload = {"config": _read_json_file(args.config, "config")}
    if args.out is not None:
        payload["out_dir"] = args.out
    result = client.run_job("/grids", payload)
    print(f"grid complete: {result['completed_runs']} runs in {result['out_dir']}")
    for failure in result["failures"]:
        print(
            f"failed: {failure['method']}/{failure['strategy']} seed {failure['seed']}: "
            f"{failure['message']}",
            file=sys.stderr,
        )
    if result["completed_runs"] == 0 and result["failures"]:
        raise _all_failed_error(result["failures"])
    return 0


def _all_failed_error(failures: list[dict]) -> DriftlearnError:
    kinds = {f.get("error") for f in failures}
    if kinds == {"ConfigurationError"}:
        return ConfigurationError("every grid run failed")
    if kinds == {"NumericalError"}:
        return NumericalError("every grid run failed")
    return DataError("every grid run failed")


def cmd_report(args, client: ServiceClient) -> int:
    result = client.call("POST", "/reports", json_body={"dir": args.dir})
    print(f"reports for {result['runs']} runs written to {result['out_dir']}")
    for name in result["files"]:
        print(f"  {name}")
    for failure in result["failures"]:
        print(f"skipped {failure['run_dir']}: {failure['error']}", file=sys.stderr)
    return 0


def cmd_score(args, client: ServiceClient) -> int:
    result = client.call(
        "POST",
        "/score",
        json_body={
            "ref_lines": _read_lines(args.ref, "reference"),
            "hyp_lines": _read_lines(args.hyp, "hypothesis"),
        },
    )
    print(json.dumps(result, indent=2))
    return 0


def cmd_snapshots_ls(args, client: ServiceClient) -> int:
    result = client.call("GET", "/snapshots", params={"run_dir": args.run_dir})
    rows = result["records"]
    print(f"{'BATCH':>5}  {'METHOD':<6}  {'DEV_WER':>8}  STATUS")
    for r in rows:
        print(
            f"{r['batch_index']:>5}  {r['method']:<6}  {_pct(r['dev_wer']):>8}  {r['status']}"
        )
    return 0


def cmd_serve(args, client: ServiceClient) -> int:
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=args.host, port=args.port)
    return 0


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftlearn",
        description="Continual-learning benchmark: drifting speaker streams, "
        "EWC/SI regularization, snapshot selection, WER reporting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus stream")
    p.add_argument("--spec", required=True, help="JSON stream spec (preset or schedule + gen)")
    p.add_argument("--seed", type=int, default=None, help="overrides any seed in the spec")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser("run", help="run one method/strategy sequence")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--run-dir", default=None)
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("grid", help="run the full method x strategy x seed grid")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", default=None, help="grid output directory")
    p.set_defaults(handler=cmd_grid)

    p = sub.add_parser("report", help="regenerate reports from run artifacts")
    p.add_argument("dir", help="grid or run directory")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("score", help="score line-aligned token files")
    p.add_argument("--ref", required=True, help="reference file, one utterance per line")
    p.add_argument("--hyp", required=True, help="hypothesis file, one utterance per line")
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser("snapshots", help="inspect snapshot stores")
    snap_sub = p.add_subparsers(dest="snapshots_command", required=True)
    p_ls = snap_sub.add_parser("ls", help="list a run's snapshots")
    p_ls.add_argument("run_dir")
    p_ls.set_defaults(handler=cmd_snapshots_ls)

    p = sub.add_parser("serve", help="serve the API over HTTP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(handler=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    client = ServiceClient()
    try:
        return args.handler(args, client)
    except DriftlearnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
