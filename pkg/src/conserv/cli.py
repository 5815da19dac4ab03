"""Experiment CLI: a thin client of the HTTP service.

Subcommands ``generate``, ``run``, ``sweep-sigma``, and ``verify-theorem``
post to the corresponding service endpoints and write the returned payloads
to disk; no numerics runs in this module. By default the app is called
in-process, so no server needs to be running; pass ``--server URL`` to talk
to a deployed instance instead. ``serve`` starts the service with uvicorn.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import httpx

from .experiment import (
    DatasetOutput,
    RunOutput,
    SweepOutput,
    write_dataset,
    write_run_outputs,
    write_sweep_outputs,
)


def _client(server: str | None):
    if server:
        return httpx.Client(base_url=server, timeout=600.0)
    from fastapi.testclient import TestClient

    from .service import app

    return TestClient(app)


def _post(args, path: str, payload: dict) -> dict:
    with _client(args.server) as client:
        response = client.post(path, json=payload)
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except (ValueError, AttributeError):
            detail = response.text
        sys.stderr.write(f"error ({response.status_code}): {detail}\n")
        raise SystemExit(2)
    return response.json()


def _load_config(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        sys.stderr.write(f"error: config file not found: {path}\n")
        raise SystemExit(2) from None
    except json.JSONDecodeError as exc:
        sys.stderr.write(f"error: config is not valid JSON: {exc}\n")
        raise SystemExit(2) from None


def _run_request(args) -> dict:
    return {
        "config": _load_config(args.config),
        "seed_override": args.seed,
        "paper_scale": args.paper_scale,
    }


def _cmd_generate(args) -> int:
    data = _post(args, "/experiment/generate", _run_request(args))
    paths = write_dataset(DatasetOutput.model_validate(data), args.out)
    for p in paths:
        print(p)
    return 0


def _cmd_run(args) -> int:
    data = _post(args, "/experiment/run", _run_request(args))
    output = RunOutput.model_validate(data)
    paths = write_run_outputs(output, args.out, args.format)
    for p in paths:
        print(p)
    n_failures = sum(len(r.failures) for r in output.results)
    if n_failures:
        sys.stderr.write(f"warning: {n_failures} replicate failure(s) recorded in output\n")
    return 0


def _cmd_sweep(args) -> int:
    data = _post(args, "/experiment/sweep-sigma", _run_request(args))
    output = SweepOutput.model_validate(data)
    paths = write_sweep_outputs(output, args.out, args.format)
    for p in paths:
        print(p)
    for result in output.results:
        print(
            f"param={result.param:g}: final ce_sq={result.ce_sq[-1]:.3e}, "
            f"ll crossover at sigma={result.ll_crossover_sigma:g}"
        )
    return 0


def _cmd_verify(args) -> int:
    payload = {
        "n_instances": args.instances,
        "seed": args.seed if args.seed is not None else 0,
        "include_gp_instance": not args.no_gp_instance,
    }
    data = _post(args, "/theorem/verify", payload)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "verify.json"
    report_path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
    for part in data["parts"]:
        flag = "pass" if part["passed"] else "FAIL"
        print(f"[{flag}] {part['name']}: {part['description']} "
              f"(checked {part['n_checked']}, worst violation {part['worst_violation']:.3e})")
    print(f"report written to {report_path}")
    return 0 if data["all_passed"] else 1


def _cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("conserv.service:app", host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conserv",
        description="Conservation-constrained field estimation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="path to a JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config master seed")
        p.add_argument("--out", default="out", help="output directory (default: ./out)")
        p.add_argument(
            "--format", choices=("json", "csv", "both"), default="both",
            help="which output files to write",
        )
        p.add_argument(
            "--paper-scale", action="store_true",
            help="benchmark-scale grids and replicate counts (201x201, 50 runs)",
        )
        p.add_argument("--server", default=None, help="remote service URL (default: in-process)")

    p_gen = sub.add_parser("generate", help="emit seeded datasets (contexts + reference solution)")
    add_common(p_gen)
    p_gen.set_defaults(func=_cmd_generate)

    p_run = sub.add_parser("run", help="run the method comparison experiment")
    add_common(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep-sigma", help="sweep the constraint noise level")
    add_common(p_sweep)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_verify = sub.add_parser("verify-theorem", help="run the convergence verification suite")
    add_common(p_verify, needs_config=False)
    p_verify.add_argument("--instances", type=int, default=50, help="number of random instances")
    p_verify.add_argument(
        "--no-gp-instance", action="store_true",
        help="skip the estimator-backed benchmark instance",
    )
    p_verify.set_defaults(func=_cmd_verify)

    p_serve = sub.add_parser("serve", help="start the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.set_defaults(func=_cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
