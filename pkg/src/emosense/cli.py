"""Command-line front-end. All pipeline commands talk HTTP to the service;
when --api is not given an ephemeral loopback server is started around the
command, so every path exercises the same wire surface.
"""

from __future__ import annotations

import argparse
import functools
import json
import sys
import threading
import time
from contextlib import contextmanager
from typing import Optional

import httpx
import uvicorn

from .config import Config, ConfigError, load_config
from .metrics import format_report, metrics_from_confusion, EvalReport

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2

_FMT = functools.partial(argparse.ArgumentDefaultsHelpFormatter, width=96)


class CommandError(Exception):
    """Structured failure: message printed to stderr, exit code 1."""


class LocalServer:
    """Ephemeral in-process service on a loopback port."""

    def __init__(self, cfg: Config):
        from .service import create_app  # deferred: keeps light commands fast

        self._uv = uvicorn.Server(
            uvicorn.Config(create_app(cfg), host="127.0.0.1", port=0, log_level="warning")
        )
        self._thread = threading.Thread(target=self._uv.run, daemon=True)

    def start(self) -> str:
        self._thread.start()
        deadline = time.monotonic() + 15
        while not self._uv.started:
            if time.monotonic() > deadline:
                raise CommandError("local service failed to start")
            time.sleep(0.01)
        port = self._uv.servers[0].sockets[0].getsockname()[1]
        return f"http://127.0.0.1:{port}"

    def stop(self) -> None:
        self._uv.should_exit = True
        self._thread.join(timeout=10)


@contextmanager
def service_client(api: Optional[str], cfg: Config):
    if api:
        with httpx.Client(base_url=api, timeout=60.0) as client:
            yield client
        return
    server = LocalServer(cfg)
    base = server.start()
    try:
        with httpx.Client(base_url=base, timeout=60.0) as client:
            yield client
    finally:
        server.stop()


def _build_config(args: argparse.Namespace, **extra) -> Config:
    overrides = dict(extra)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "store", None) is not None:
        overrides["store_root"] = args.store
    if getattr(args, "window", None) is not None:
        overrides["window_s"] = args.window
    return load_config(getattr(args, "config", None), **overrides)


def _check(resp: httpx.Response) -> dict:
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise CommandError(f"service returned {resp.status_code}: {detail}")
    return resp.json()


# -- commands -------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    from .sensors import generate_corpus

    cfg = _build_config(args)
    records = generate_corpus(
        list(cfg.regimes.values()), args.participant, args.per_class, seed=cfg.seed
    )
    lines = [json.dumps(r.to_json_obj()) for r in records]
    if args.publish:
        with service_client(args.api, cfg) as client:
            total = _ingest_lines(client, lines)
        print(f"published {total} records to the train topic")
    else:
        out = sys.stdout if args.out == "-" else open(args.out, "w", encoding="utf-8")
        try:
            for line in lines:
                out.write(line + "\n")
        finally:
            if out is not sys.stdout:
                out.close()
        if args.out != "-":
            print(f"wrote {len(lines)} records to {args.out}")
    return EXIT_OK


def _ingest_lines(client: httpx.Client, lines: list[str], batch_size: int = 1000) -> int:
    total = 0
    for start in range(0, len(lines), batch_size):
        chunk = lines[start : start + batch_size]
        records = [json.loads(line) for line in chunk]
        last = start + batch_size >= len(lines)
        doc = _check(client.post("/api/ingest", json={"records": records, "flush": last}))
        total += doc["published"]
    return total


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    try:
        with open(args.infile, encoding="utf-8") as f:
            lines = [line.strip() for line in f if line.strip()]
    except OSError as exc:
        raise CommandError(f"cannot read {args.infile}: {exc}")
    with service_client(args.api, cfg) as client:
        total = _ingest_lines(client, lines)
    print(f"ingested {total} records into the store")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    hp: dict = {}
    for name in ("learning_rate", "epochs", "l2_lambda", "batch_size"):
        value = getattr(args, name)
        if value is not None:
            hp[name] = value
    if args.seed is not None:
        hp["seed"] = args.seed
    body: dict = {"participant_id": args.participant}
    if hp:
        body["hyperparams"] = hp
    if args.test_fraction is not None:
        body["test_fraction"] = args.test_fraction

    with service_client(args.api, cfg) as client:
        job = _check(client.post("/api/train", json=body))
        job_id = job["job_id"]
        deadline = time.monotonic() + args.timeout
        while True:
            job = _check(client.get(f"/api/train/{job_id}"))
            if job["status"] in ("done", "failed"):
                break
            if time.monotonic() > deadline:
                raise CommandError(f"training job {job_id} timed out")
            time.sleep(0.2)
        if job["status"] == "failed":
            raise CommandError(f"training failed: {job.get('error')}")
        doc = _check(client.get(f"/api/model/{args.participant}/metrics"))

    report = EvalReport.from_dict(doc)
    print(f"participant: {args.participant}")
    rows = doc.get("rows", {})
    print(
        f"rows: total={rows.get('total')} train={rows.get('train')} "
        f"(after smote={rows.get('train_after_smote')}) test={rows.get('test')}"
    )
    print(f"train accuracy: {doc.get('train_accuracy', float('nan')):.4f}")
    print()
    print(format_report(report))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        with open(args.matrix, encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise CommandError(f"cannot read matrix file: {exc}")
    matrix = doc["matrix"] if isinstance(doc, dict) else doc
    labels = doc.get("labels", ["Angry", "Happy", "Sad"]) if isinstance(doc, dict) else [
        "Angry", "Happy", "Sad"
    ]
    try:
        report = metrics_from_confusion(matrix, labels)
    except ValueError as exc:
        raise CommandError(str(exc))
    print(format_report(report))
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from .runtime import Runtime
    from .service import create_app

    cfg = _build_config(args)
    rt = Runtime(cfg)
    tcp = rt.start_tcp()
    if tcp:
        print(f"bus TCP front-end on {tcp[0]}:{tcp[1]}")
    app = create_app(runtime=rt)
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    finally:
        rt.close()
    return EXIT_OK


def cmd_demo(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    regime = args.regime.capitalize() if args.regime else None
    results = []
    with service_client(args.api, cfg) as client:
        for i in range(args.count):
            body: dict = {"participant_id": args.participant}
            if args.window is not None:
                body["window_s"] = args.window
            if regime:
                body["regime"] = regime
            created = _check(client.post("/api/sessions", json=body))
            session_id = created["session_id"]
            deadline = time.monotonic() + (args.window or cfg.window_s) + cfg.result_timeout_s + 10
            while True:
                doc = _check(client.get(f"/api/sessions/{session_id}"))
                if doc["status"] in ("done", "failed"):
                    break
                if time.monotonic() > deadline:
                    raise CommandError(f"session {session_id} never completed")
                time.sleep(0.1)
            if doc["status"] == "failed":
                raise CommandError(f"session failed: {doc.get('error')}")
            results.append(doc)
            print(
                f"session {i + 1}/{args.count}: {doc['label']} "
                f"(elapsed {doc['elapsed_ms']} ms, window {doc['window_s']} s) "
                f"recommendation: {doc['recommendation']}"
            )
        stats = _check(client.get("/api/latency"))
    for key, title in (("including_window", "incl. window"), ("excluding_window", "excl. window")):
        s = stats[key]
        print(
            f"latency {title}: mean_ms={s['mean_ms']:.1f} p50_ms={s['p50_ms']:.1f} "
            f"p95_ms={s['p95_ms']:.1f} count={s['count']}"
        )
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emosense",
        description="Emotion detection pipeline: generate data, ingest, train, serve, demo.",
        formatter_class=_FMT,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="override the configured random seed")
    common.add_argument("--store", help="override the object store root directory")

    api = argparse.ArgumentParser(add_help=False)
    api.add_argument(
        "--api", help="base URL of a running service; omit to self-host one for the command"
    )

    p = sub.add_parser(
        "generate", parents=[common, api], formatter_class=_FMT,
        help="synthesize a balanced labeled corpus as NDJSON or publish it",
    )
    p.add_argument("--participant", default="p1", help="participant id")
    p.add_argument("--per-class", type=int, default=3500, dest="per_class",
                   help="records per emotion label")
    p.add_argument("--out", default="-", help="output NDJSON path, '-' for stdout")
    p.add_argument("--publish", action="store_true",
                   help="publish records to the train topic instead of writing a file")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser(
        "ingest", parents=[common, api], formatter_class=_FMT,
        help="replay an NDJSON corpus through the bus into the store",
    )
    p.add_argument("--in", dest="infile", required=True, help="input NDJSON path")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser(
        "train", parents=[common, api], formatter_class=_FMT,
        help="train the participant's classifier and print its evaluation",
    )
    p.add_argument("--participant", default="p1", help="participant id")
    p.add_argument("--learning-rate", type=float, dest="learning_rate", help="SGD step size")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--l2-lambda", type=float, dest="l2_lambda", help="L2 penalty weight")
    p.add_argument("--batch-size", type=int, dest="batch_size", help="SGD mini-batch size")
    p.add_argument("--test-fraction", type=float, dest="test_fraction",
                   help="held-out fraction per class")
    p.add_argument("--timeout", type=float, default=300.0, help="job wait timeout seconds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "eval", formatter_class=_FMT,
        help="metrics from a confusion-matrix JSON file (3x3 counts)",
    )
    p.add_argument("--matrix", required=True, help="JSON file with a 3x3 count matrix")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "serve", parents=[common], formatter_class=_FMT,
        help="run the service: bus, rules, ETL, endpoints, HTTP API",
    )
    p.add_argument("--host", default="127.0.0.1", help="bind address")
    p.add_argument("--port", type=int, default=8000, help="bind port")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser(
        "demo", parents=[common, api], formatter_class=_FMT,
        help="run scripted detection sessions and report latency",
    )
    p.add_argument("--participant", default="p1", help="participant id")
    p.add_argument("--regime", help="emotion regime to pin the simulator to (angry/happy/sad)")
    p.add_argument("--window", type=int, help="sensing window seconds")
    p.add_argument("--count", type=int, default=1, help="number of sessions to run")
    p.set_defaults(func=cmd_demo)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except KeyboardInterrupt:
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
