"""Command-line entry points: ``bench`` (experiments) and ``hmi`` (artifacts, server)."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, plot
from .scheduler import SchedulerConfig
from .transformer import ModelConfig, generate_model, load_model, save_model


def _bench_config(path) -> bench.BenchConfig:
    return bench.BenchConfig.from_file(path) if path else bench.BenchConfig()


def bench_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bench", description="Multi-tenant serving experiments (virtual clock).")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="serve one workload under one scheme and write CSV reports")
    run.add_argument("--mode", required=True, choices=["hplm", "dedicated-swap", "shared", "compressed"])
    run.add_argument("--tenants", type=int, required=True)
    run.add_argument("--workload", choices=["constant", "burst"], default="constant")
    run.add_argument("--config", type=Path, help="TOML file with a [bench] table")
    run.add_argument("--out", type=Path, required=True)
    run.add_argument("--requests-per-tenant", type=int, default=100)
    run.add_argument("--interval", type=float, default=20.0, help="constant-rate interval in seconds")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--saturate", action="store_true", help="queue every request at t=0 (peak throughput)")

    abl = sub.add_parser("ablation", help="throughput of each pipeline variant (sync ... fine)")
    abl.add_argument("--config", type=Path)
    abl.add_argument("--tenants", type=int, default=16)
    abl.add_argument("--requests", type=int, default=1000)
    abl.add_argument("--out", type=Path)

    args = parser.parse_args(argv)
    cfg = _bench_config(args.config)
    if args.command == "run":
        arrival = (bench.Burst() if args.workload == "burst"
                   else bench.ConstantRate(args.interval, args.requests_per_tenant))
        spec = bench.WorkloadSpec(args.tenants, arrival, seed=args.seed)
        report = bench.run_baseline(args.mode, spec, cfg, saturate=args.saturate)
        bench.emit_report(report, args.out)
        for k, v in report.summary().items():
            print(f"{k}: {v}")
        return 0

    results = bench.pipeline_ablation(cfg, args.tenants, args.requests)
    sync = results["sync"]
    rows = [(name, f"{tp:.1f}", f"{tp / sync:.3f}") for name, tp in results.items()]
    for row in rows:
        print("{:<22} {:>10} req/s  x{}".format(*row))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / "ablation.csv", "w", newline="") as fh:
            fh.write("# saturated throughput per pipeline variant; speedup relative to sync\n")
            writer = csv.writer(fh)
            writer.writerow(("variant", "throughput_rps", "speedup_vs_sync"))
            writer.writerows(rows)
    return 0


def synthetic_corpus(vocab_size: int, sentences: int, length: int, seed: int) -> list[list[int]]:
    """Zipf-distributed token sequences, a stand-in for a real tokenized corpus."""
    rng = np.random.default_rng(seed)
    ids = rng.zipf(1.3, size=(sentences, length)) - 1
    return (ids % vocab_size).tolist()


def build_artifacts(out: Path, config: ModelConfig, sentences: int = 200, length: int = 24) -> None:
    out.mkdir(parents=True, exist_ok=True)
    model = generate_model(config)
    save_model(model, out / "model.hmi")
    corpus = synthetic_corpus(config.vocab_size, sentences, length, config.seed)
    plot.persist(plot.build_root(corpus, model), out / "root.plt")


def hmi_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hmi", description="Multi-tenant hierarchical-model inference server.")
    sub = parser.add_subparsers(dest="command", required=True)

    build = sub.add_parser("build-artifacts", help="seeded model (HMI1) and root PLOT (PLT1)")
    build.add_argument("--out", type=Path, required=True)
    build.add_argument("--seed", type=int, default=0)
    build.add_argument("--mode", choices=["encoder", "causal"], default="encoder")
    build.add_argument("--sentences", type=int, default=200)

    serve = sub.add_parser("serve", help="run the HTTP dispatcher")
    serve.add_argument("--artifacts", type=Path, required=True)
    serve.add_argument("--config", type=Path, help="scheduler TOML config")
    serve.add_argument("--listen", default="127.0.0.1:8080")
    serve.add_argument("--min-corpus-tokens", type=int, default=10_000)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "build-artifacts":
        build_artifacts(args.out, ModelConfig(seed=args.seed, mode=args.mode), args.sentences)
        print(json.dumps({"model": str(args.out / "model.hmi"), "root": str(args.out / "root.plt")}))
        return 0

    from .service import HMIServer, make_http_server

    config = SchedulerConfig.from_file(args.config) if args.config else SchedulerConfig()
    model = load_model(args.artifacts / "model.hmi")
    root = plot.load(args.artifacts / "root.plt")
    if (args.artifacts / "state" / "state.json").exists():
        hmi = HMIServer.load_state(args.artifacts / "state", model, root, config, args.min_corpus_tokens)
    else:
        hmi = HMIServer(model, root, config, args.min_corpus_tokens)
    host, _, port = args.listen.rpartition(":")
    httpd = make_http_server(hmi, host or "127.0.0.1", int(port))
    hmi.start()
    logging.getLogger("hmi").info("listening on %s:%d", *httpd.server_address[:2])
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.server_close()
        hmi.stop()
        hmi.save_state(args.artifacts / "state")
    return 0


if __name__ == "__main__":
    sys.exit(hmi_main())
