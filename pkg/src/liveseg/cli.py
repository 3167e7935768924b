"""Reproduction driver: pretraining, data generation, benchmark runs,
ablations, report aggregation, and the annotation service.

Configuration is plain ``key = value`` text with sections (see
``default_config_text``); command-line flags override file values. Every run
writes a self-describing output tree::

    out/<run-id>/
      config.txt        # resolved configuration + hash
      events/*.json     # one replayable report per stream
      report.json       # suite summary
      report.csv        # one row per stream

Exit status is nonzero whenever a protocol invariant is violated.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import controller, data, metrics, suites
from .adapters import LoraConfig
from .model import BaseWeights, PretrainConfig, pretrain_base
from .oracle import ProtocolConfig, TimeModel

DEFAULT_CONFIG = """\
[protocol]
tau_iou = 0.5
max_clicks = 3
click_sigma = 2.0

[time]
t_loc = 1.0
t_click = 1.5
t_full_mask = 80.0
count_training_latency = true

[lora]
rank = 4
alpha = 4.0
dropout = 0.1
learning_rate = 0.02
max_epochs = 40

[bench]
seed = 7
variant = lit_lora
trigger = oracle
batch_mode = joint
window = 1
placement = decoder_lora
"""


def default_config_text() -> str:
    return DEFAULT_CONFIG


def load_config(path: str | None) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    parser.read_string(DEFAULT_CONFIG)
    if path:
        with open(path) as fh:
            parser.read_file(fh)
    return parser


def resolved_config_text(cfg: configparser.ConfigParser) -> str:
    lines = []
    for section in cfg.sections():
        lines.append(f"[{section}]")
        for key, value in sorted(cfg.items(section)):
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: configparser.ConfigParser) -> str:
    return hashlib.sha256(resolved_config_text(cfg).encode()).hexdigest()[:12]


def _apply_overrides(cfg: configparser.ConfigParser, args: argparse.Namespace) -> None:
    mapping = {
        "tau": ("protocol", "tau_iou"),
        "variant": ("bench", "variant"),
        "trigger": ("bench", "trigger"),
        "seed": ("bench", "seed"),
        "epochs": ("lora", "max_epochs"),
        "lr": ("lora", "learning_rate"),
        "batch_mode": ("bench", "batch_mode"),
        "window": ("bench", "window"),
        "placement": ("bench", "placement"),
    }
    for attr, (section, key) in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(section, key, str(value))


def _protocol(cfg) -> ProtocolConfig:
    return ProtocolConfig(tau_iou=cfg.getfloat("protocol", "tau_iou"),
                          max_clicks=cfg.getint("protocol", "max_clicks"),
                          click_sigma=cfg.getfloat("protocol", "click_sigma"))


def _time_model(cfg) -> TimeModel:
    return TimeModel(t_loc=cfg.getfloat("time", "t_loc"),
                     t_click=cfg.getfloat("time", "t_click"),
                     t_full_mask=cfg.getfloat("time", "t_full_mask"),
                     count_training_latency=cfg.getboolean("time", "count_training_latency"))


def _lora(cfg) -> LoraConfig:
    return LoraConfig(rank=cfg.getint("lora", "rank"),
                      alpha=cfg.getfloat("lora", "alpha"),
                      dropout=cfg.getfloat("lora", "dropout"),
                      learning_rate=cfg.getfloat("lora", "learning_rate"),
                      max_epochs=cfg.getint("lora", "max_epochs"))


def _variant(cfg) -> controller.MethodVariant:
    return controller.MethodVariant(kind=cfg.get("bench", "variant"),
                                    placement=cfg.get("bench", "placement"),
                                    batch_mode=cfg.get("bench", "batch_mode"),
                                    window=cfg.getint("bench", "window"))


def _trigger(cfg) -> controller.TriggerMode:
    return controller.TriggerMode(kind=cfg.get("bench", "trigger"))


def _load_weights(path: str) -> BaseWeights:
    weights_dir = Path(path)
    if not (weights_dir / "manifest.json").exists():
        sys.exit(f"error: no weight bundle at {weights_dir} (run `liveseg pretrain` first)")
    return BaseWeights.load(weights_dir)


def _run_one(job) -> dict:
    spec, base_dir, cfg_text, seed = job
    cfg = configparser.ConfigParser()
    cfg.read_string(cfg_text)
    base = _load_weights(base_dir)
    bundle = data.generate_video(spec)
    return controller.run_video_stream(
        bundle, base, _variant(cfg), _trigger(cfg), _protocol(cfg),
        _time_model(cfg), _lora(cfg), seed=seed)


def _write_run(out_dir: Path, cfg, reports: list[dict], extra_meta: dict | None = None) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "events").mkdir(exist_ok=True)
    text = resolved_config_text(cfg)
    (out_dir / "config.txt").write_text(text + f"\n# config_hash = {config_hash(cfg)}\n")
    for report in reports:
        (out_dir / "events" / f"{report['stream_id']}.json").write_text(
            json.dumps(report, indent=1))
    update_walls = [r["adapter"]["mean_update_wall_s"] for r in reports
                    if r["adapter"]["update_count"]]
    summary = {
        "config_hash": config_hash(cfg),
        "digest": metrics.report_digest(sorted(reports, key=lambda r: r["stream_id"])),
        "streams": len(reports),
        "mean_corrections": float(np.mean([r["totals"]["corrections"] for r in reports])),
        "mean_clicks": float(np.mean([r["totals"]["clicks"] for r in reports])),
        "mean_escalations": float(np.mean([r["totals"]["escalations"] for r in reports])),
        "mean_seconds": float(np.mean([(r["totals"]["user_ms"] + r["totals"]["train_ms"]) / 1000
                                       for r in reports])),
        "mean_j": float(np.mean([r["metrics"]["mean_j"] for r in reports])),
        "mean_f": float(np.mean([r["metrics"]["mean_f"] for r in reports])),
        "mean_update_wall_s": float(np.mean(update_walls)) if update_walls else 0.0,
    }
    summary.update(extra_meta or {})
    payload = {"summary": summary, "streams": reports}
    (out_dir / "report.json").write_text(json.dumps(payload, indent=1))
    rows = [{"stream_id": r["stream_id"], "seed": r["seed"], "variant": r["variant"],
             "corrections": r["totals"]["corrections"], "clicks": r["totals"]["clicks"],
             "escalations": r["totals"]["escalations"],
             "adapter_accepted": r["totals"]["adapter_accepted"],
             "user_ms": r["totals"]["user_ms"], "train_ms": r["totals"]["train_ms"],
             "mean_j": r["metrics"]["mean_j"], "mean_f": r["metrics"]["mean_f"]}
            for r in reports]
    header = list(rows[0].keys())
    csv_text = ",".join(header) + "\n" + "\n".join(
        ",".join(str(row[k]) for k in header) for row in rows) + "\n"
    (out_dir / "report.csv").write_text(csv_text)
    return summary


def _bench(cfg, scenarios, weights_dir: str, out_dir: Path, workers: int = 1) -> dict:
    seed = cfg.getint("bench", "seed")
    jobs = [(spec, weights_dir, resolved_config_text(cfg), seed) for spec in scenarios]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_one, jobs))
    else:
        reports = [_run_one(job) for job in jobs]
    reports.sort(key=lambda r: r["stream_id"])

    protocol = _protocol(cfg)
    violations = []
    for spec, report in zip(sorted(scenarios, key=lambda s: s.stream_id), reports):
        bundle = data.generate_video(spec)
        violations.extend(f"{report['stream_id']}: {v}"
                          for v in controller.audit_event_log(report, bundle, protocol))
    summary = _write_run(out_dir, cfg, reports,
                         {"suite": [s.stream_id for s in scenarios],
                          "violations": violations})
    if violations:
        print("protocol violations detected:", file=sys.stderr)
        for v in violations:
            print(f"  {v}", file=sys.stderr)
        sys.exit(3)
    return summary


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> None:
    cfg = load_config(args.config)
    out = Path(args.out)
    pcfg = PretrainConfig(steps=args.steps, save_dir=out)
    base = pretrain_base(suites.PRETRAIN_SCENARIOS, pcfg, args.seed,
                         progress=lambda s, n, l: print(f"step {s}/{n} loss {l:.4f}",
                                                        flush=True))
    print(f"wrote weight bundle to {out} ({base.param_count()} parameters)")


def cmd_gen_data(args) -> None:
    out = Path(args.out)
    if args.suite:
        scenarios = {"bench": suites.BENCH_SCENARIOS,
                     "pretrain": suites.PRETRAIN_SCENARIOS,
                     "eval-easy": suites.EVAL_EASY_SCENARIOS}[args.suite]
        for spec in scenarios:
            data.save_bundle(data.generate_video(spec), out / spec.stream_id)
        print(f"wrote {len(scenarios)} bundles to {out}")
    elif args.family:
        spec = data.ScenarioSpec(args.family, frames=args.frames, seed=args.seed)
        data.save_bundle(data.generate_video(spec), out)
        print(f"wrote bundle {spec.stream_id} to {out}")
    else:
        stream = data.generate_class_stream(suites.CLASS_SUITE)
        data.save_class_stream(stream, out)
        print(f"wrote class stream ({len(stream.items)} items) to {out}")


def cmd_run(args) -> None:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    if args.bundle:
        bundle = data.load_bundle(args.bundle)
    else:
        parts = args.scenario.split(":")
        family = parts[0]
        seed = int(parts[1]) if len(parts) > 1 else 0
        frames = int(parts[2]) if len(parts) > 2 else 60
        bundle = data.generate_video(data.ScenarioSpec(family, seed=seed, frames=frames))
    base = _load_weights(args.weights)
    report = controller.run_video_stream(
        bundle, base, _variant(cfg), _trigger(cfg), _protocol(cfg),
        _time_model(cfg), _lora(cfg), seed=cfg.getint("bench", "seed"))
    out = Path(args.out or f"out/run-{config_hash(cfg)}-{bundle.stream_id}")
    _write_run(out, cfg, [report], {"suite": [bundle.stream_id]})
    violations = controller.audit_event_log(report, bundle, _protocol(cfg))
    print(f"{bundle.stream_id}: corrections={report['totals']['corrections']} "
          f"J={report['metrics']['mean_j']:.3f} -> {out}")
    if violations:
        for v in violations:
            print(f"violation: {v}", file=sys.stderr)
        sys.exit(3)


def cmd_bench(args) -> None:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    out = Path(args.out or f"out/bench-{cfg.get('bench', 'variant')}-{config_hash(cfg)}")
    summary = _bench(cfg, suites.BENCH_SCENARIOS, args.weights, out, workers=args.workers)
    print(json.dumps(summary, indent=1))
    print(f"run written to {out}")


def cmd_ablate_epochs(args) -> None:
    epoch_grid = [int(v) for v in args.epochs_list.split(",")]
    cfg = load_config(args.config)
    out_root = Path(args.out or "out/ablate-epochs")
    cfg.set("bench", "variant", "original")
    base_summary = _bench(cfg, suites.BENCH_SCENARIOS, args.weights,
                          out_root / "original")
    rows = []
    for epochs in epoch_grid:
        cfg = load_config(args.config)
        cfg.set("bench", "variant", "lit_lora")
        cfg.set("lora", "max_epochs", str(epochs))
        summary = _bench(cfg, suites.BENCH_SCENARIOS, args.weights,
                         out_root / f"epochs-{epochs}")
        reduction = (base_summary["mean_corrections"] - summary["mean_corrections"]) \
            / base_summary["mean_corrections"]
        rows.append({"epochs": epochs,
                     "mean_corrections": summary["mean_corrections"],
                     "reduction": reduction,
                     "mean_update_wall_s": summary["mean_update_wall_s"]})
        print(f"epochs={epochs}: corrections {summary['mean_corrections']:.2f} "
              f"reduction {reduction:.1%} update {summary['mean_update_wall_s']:.2f}s")
    (out_root / "ablation.json").write_text(json.dumps(
        {"baseline_mean_corrections": base_summary["mean_corrections"], "rows": rows}, indent=1))
    csv_text = "epochs,mean_corrections,reduction,mean_update_wall_s\n" + "\n".join(
        f"{r['epochs']},{r['mean_corrections']},{r['reduction']},{r['mean_update_wall_s']}"
        for r in rows) + "\n"
    (out_root / "ablation.csv").write_text(csv_text)


def cmd_ablate_variants(args) -> None:
    cfg = load_config(args.config)
    out_root = Path(args.out or "out/ablate-variants")
    rows = []
    for kind in ("original", "replace_original", "lit_no_cl", "lit_ft",
                 "lit_multi_lora", "lit_lora"):
        cfg = load_config(args.config)
        cfg.set("bench", "variant", kind)
        if args.lr is None:
            cfg.set("lora", "learning_rate",
                    str(suites.update_config_for(kind).learning_rate))
        summary = _bench(cfg, suites.BENCH_SCENARIOS, args.weights, out_root / kind)
        rows.append({"variant": kind, "mean_corrections": summary["mean_corrections"],
                     "mean_seconds": summary["mean_seconds"]})
        print(f"{kind}: corrections {summary['mean_corrections']:.2f}")
    (out_root / "ablation.json").write_text(json.dumps(rows, indent=1))
    csv_text = "variant,mean_corrections,mean_seconds\n" + "\n".join(
        f"{r['variant']},{r['mean_corrections']},{r['mean_seconds']}" for r in rows) + "\n"
    (out_root / "ablation.csv").write_text(csv_text)


def cmd_ablate_batch(args) -> None:
    grid = [("1", "joint", 1), ("3", "joint", 3), ("5", "joint", 5),
            ("3/1", "sequential", 3), ("5/1", "sequential", 5)]
    out_root = Path(args.out or "out/ablate-batch")
    rows = []
    for label, mode, window in grid:
        cfg = load_config(args.config)
        cfg.set("bench", "variant", "lit_lora")
        cfg.set("bench", "batch_mode", mode)
        cfg.set("bench", "window", str(window))
        name = f"{window}-{1 if mode == 'sequential' else window}"
        summary = _bench(cfg, suites.BENCH_SCENARIOS, args.weights, out_root / name)
        rows.append({"setting": f"{window}/{1 if mode == 'sequential' else window}",
                     "mean_corrections": summary["mean_corrections"],
                     "mean_update_wall_s": summary["mean_update_wall_s"]})
        print(f"{rows[-1]['setting']}: corrections {summary['mean_corrections']:.2f} "
              f"update {summary['mean_update_wall_s']:.2f}s")
    (out_root / "ablation.json").write_text(json.dumps(rows, indent=1))
    csv_text = "setting,mean_corrections,mean_update_wall_s\n" + "\n".join(
        f"{r['setting']},{r['mean_corrections']},{r['mean_update_wall_s']}" for r in rows) + "\n"
    (out_root / "ablation.csv").write_text(csv_text)


def cmd_class_bench(args) -> None:
    stream = data.generate_class_stream(suites.CLASS_SUITE)
    out = Path(args.out or "out/class-bench")
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for kind in ("original", "lit_lora"):
        report = controller.run_class_stream(
            stream, controller.MethodVariant(kind),
            update_cfg=suites.BENCH_CLASS_LORA, seed=args.seed)
        results[kind] = report
        (out / f"{kind}.json").write_text(json.dumps(report, indent=1))
    b = results["original"]["mean_corrections_per_group"]
    t = results["lit_lora"]["mean_corrections_per_group"]
    reduction = 0.0 if b == 0 else (b - t) / b
    summary = {"baseline_corrections_per_group": b,
               "lit_corrections_per_group": t, "reduction": reduction}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary, indent=1))


def cmd_report(args) -> None:
    def load_run(path):
        payload = json.loads((Path(path) / "report.json").read_text())
        return payload["streams"], payload["summary"]

    base_reports, base_summary = load_run(args.baseline)
    treat_reports, treat_summary = load_run(args.treatment)
    if base_summary.get("suite") != treat_summary.get("suite"):
        sys.exit("error: runs cover different suites; refusing to pair them")
    try:
        table = metrics.aggregate(base_reports, treat_reports,
                                  baseline_label="baseline", treatment_label="treatment")
    except ValueError as exc:
        sys.exit(f"error: runs cover different suites; refusing to pair them ({exc})")
    out = Path(args.out or "out/report")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(table, indent=1))
    (out / "report.csv").write_text(metrics.table_csv(table))
    (out / "histogram.csv").write_text(metrics.histogram_csv(table))
    print(json.dumps(table["summary"], indent=1))


def cmd_serve(args) -> None:
    import uvicorn

    from .service import create_app

    base = _load_weights(args.weights)
    app = create_app(base)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="liveseg",
                                     description="online-adapting interactive segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the frozen base model")
    p.add_argument("--out", default="weights")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=suites.PRETRAIN_SEED)
    p.add_argument("--config")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("gen-data", help="generate synthetic bundles")
    p.add_argument("--out", required=True)
    p.add_argument("--suite", choices=["bench", "pretrain", "eval-easy"])
    p.add_argument("--family", choices=list(data.FAMILIES))
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    def add_run_flags(p, with_variant=True):
        p.add_argument("--weights", default="weights")
        p.add_argument("--config")
        p.add_argument("--out")
        p.add_argument("--tau", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        if with_variant:
            p.add_argument("--variant", choices=list(controller.VARIANT_KINDS))
            p.add_argument("--trigger",
                           choices=["oracle", "predicted_auto", "predicted_semi"])
            p.add_argument("--batch-mode", dest="batch_mode",
                           choices=["joint", "sequential"])
            p.add_argument("--window", type=int)
            p.add_argument("--placement",
                           choices=["decoder_lora", "memory_adapter"])

    p = sub.add_parser("run", help="run one stream")
    p.add_argument("--bundle")
    p.add_argument("--scenario", help="family:seed[:frames]",
                   default="camouflage:501")
    add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="run the shipped benchmark suite")
    add_run_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate-epochs", help="epoch-budget ablation")
    add_run_flags(p, with_variant=False)
    p.add_argument("--epochs-list", default="5,10,20,40,60,100")
    p.set_defaults(func=cmd_ablate_epochs)

    p = sub.add_parser("ablate-variants", help="adaptation-strategy ablation")
    add_run_flags(p, with_variant=False)
    p.set_defaults(func=cmd_ablate_variants)

    p = sub.add_parser("ablate-batch", help="joint vs sequential window ablation")
    add_run_flags(p, with_variant=False)
    p.set_defaults(func=cmd_ablate_batch)

    p = sub.add_parser("class-bench", help="streaming classification benchmark")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=suites.BENCH_SEED)
    p.set_defaults(func=cmd_class_bench)

    p = sub.add_parser("report", help="pair a baseline and a treatment run")
    p.add_argument("--baseline", required=True)
    p.add_argument("--treatment", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="start the annotation service")
    p.add_argument("--weights", default="weights")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> None:
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
