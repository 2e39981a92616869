"""Command-line interface: gen, train, eval, predict, cost, bench, ablate.

Exit codes: 0 success, 1 config/data error, 2 usage error, 3 numeric failure.
Machine-readable artifacts (CSV, JSONL, tensors, figures) land under --out;
stdout carries human-readable summaries.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import blocks, costs, data, network, report, ssm, train as training
from .errors import (ConfigError, ContractError, DataError, LoadError,
                     NumericError, ParameterError, ShapeError)
from .tensor import Tensor

BENCH_LENGTHS = (256, 512, 1024, 2048, 4096)
SCAN_RATIO_BAND = (1.4, 3.0)
ATTN_RATIO_BAND = (3.0, 6.0)

_NET_FIELDS = {f.name for f in dataclasses.fields(network.NetworkConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(training.TrainConfig)}

_ABLATION_FLAG_TO_VARIANT = {
    "none": "none",
    "conv3": "conv3",
    "attn": "attention",
    "no-adjust": "no-adjust",
    "no-residual": "no-residual",
}


def _load_config_file(path):
    if path is None:
        return {}
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = set(payload) - _NET_FIELDS - _TRAIN_FIELDS
    if unknown:
        raise ConfigError(f"config file {path} has unknown fields {sorted(unknown)}")
    return payload


def _net_config(args, file_cfg, rank=None, num_classes=None, in_channels=None):
    fields = {k: v for k, v in file_cfg.items() if k in _NET_FIELDS}
    if "encoder_rvm_counts" in fields:
        fields["encoder_rvm_counts"] = tuple(fields["encoder_rvm_counts"])
    if rank is not None:
        fields["rank"] = rank
    if getattr(args, "rank", None) is not None:
        fields["rank"] = args.rank
    if "rank" not in fields:
        fields["rank"] = 3
    if num_classes is not None:
        fields.setdefault("num_classes", num_classes)
    if getattr(args, "classes", None) is not None:
        fields["num_classes"] = args.classes
    if "num_classes" not in fields:
        fields["num_classes"] = network.default_config(fields["rank"]).num_classes
    if in_channels is not None:
        fields.setdefault("in_channels", in_channels)
    cfg = network.NetworkConfig(**fields).validate()
    variant = _ABLATION_FLAG_TO_VARIANT[getattr(args, "ablation", None) or "none"]
    return network.apply_ablation(cfg, variant).validate()


def _train_config(args, file_cfg):
    fields = {k: v for k, v in file_cfg.items() if k in _TRAIN_FIELDS}
    if getattr(args, "seed", None) is not None:
        fields["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        fields["epochs"] = args.epochs
    if getattr(args, "batch", None) is not None:
        fields["batch_size"] = args.batch
    if getattr(args, "deterministic", False):
        fields["deterministic"] = True
    return training.TrainConfig(**fields).validate()


def _out_dir(args, required=False):
    if args.out is None:
        if required:
            raise ConfigError("this command needs --out")
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sidecar_config(weights_path):
    sidecar = Path(weights_path).with_suffix(".json")
    if not sidecar.exists():
        return None
    payload = json.loads(sidecar.read_text())
    fields = payload.get("net_config")
    if fields is None:
        return None
    fields = dict(fields)
    fields["encoder_rvm_counts"] = tuple(fields["encoder_rvm_counts"])
    return network.NetworkConfig(**fields).validate()


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    out = _out_dir(args, required=True)
    size = args.size
    extents = (size,) * args.rank
    manifest = data.synth_generate(args.seed or 0, args.n, args.rank, extents,
                                   out, num_classes=args.classes or 3)
    sample = data.load_sample(manifest, 0)
    report.save_overlay(sample.image, sample.mask, None, out / "preview.png")
    print(f"wrote {len(manifest)} samples ({args.rank}D, {'x'.join(map(str, extents))}) "
          f"to {out}")
    return 0


def cmd_train(args):
    out = _out_dir(args, required=True)
    file_cfg = _load_config_file(args.config)
    manifest = data.load_manifest(args.data)
    samples = data.load_samples(manifest)
    net_cfg = _net_config(args, file_cfg, rank=manifest.rank,
                          num_classes=manifest.num_classes,
                          in_channels=samples[0].image.shape[0])
    train_cfg = _train_config(args, file_cfg)

    def echo(row):
        print(f"epoch {row['epoch']:>3}  lr {row['lr']:.3e}  loss {row['loss']:.4f}  "
              f"train_dsc {row['train_dsc']:.4f}  {row['wall_ms']:.0f} ms")

    _, log_rows = training.train(train_cfg, net_cfg, samples, out_dir=out,
                                 log_fn=echo)
    report.save_training_curves(log_rows, out / "training_curves.png")
    print(f"checkpoints and log written to {out}")
    return 0


def _load_eval_inputs(args):
    manifest = data.load_manifest(args.data)
    samples = data.load_samples(manifest)
    net_cfg = _sidecar_config(args.weights)
    if net_cfg is None:
        file_cfg = _load_config_file(args.config)
        net_cfg = _net_config(args, file_cfg, rank=manifest.rank,
                              num_classes=manifest.num_classes,
                              in_channels=samples[0].image.shape[0])
    weights = network.load_weights(args.weights, net_cfg)
    return manifest, samples, net_cfg, weights


def cmd_eval(args):
    manifest, samples, net_cfg, weights = _load_eval_inputs(args)
    metrics = training.evaluate(weights, net_cfg, samples)
    payload = json.dumps(metrics.to_dict(), indent=2)
    print(payload)
    out = _out_dir(args)
    if out is not None:
        (out / "metrics.json").write_text(payload)
        report.save_metric_figure(metrics, manifest.class_names,
                                  out / "metrics.png")
    return 0


def cmd_predict(args):
    out = _out_dir(args, required=True)
    _, samples, net_cfg, weights = _load_eval_inputs(args)
    scores = []
    for sample in samples:
        pred = training.predict_mask(weights, net_cfg, sample.image)
        data.save_tensor(pred.astype(np.uint16), out / f"{sample.id}_pred.lmt")
        report.save_overlay(sample.image, sample.mask, pred,
                            out / f"{sample.id}_overlay.png")
        scores.append(training.foreground_dsc(pred, sample.mask,
                                              net_cfg.num_classes))
        print(f"{sample.id}: foreground DSC {scores[-1]:.4f}")
    print(f"mean foreground DSC {np.mean(scores):.4f} over {len(scores)} samples")
    return 0


def _default_extent(rank):
    return 128 if rank == 3 else 512


def cmd_cost(args):
    file_cfg = _load_config_file(args.config)
    net_cfg = _net_config(args, file_cfg)
    size = args.size or _default_extent(net_cfg.rank)
    cost = costs.count_flops(net_cfg, (size,) * net_cfg.rank)
    sys.stdout.write(cost.to_csv())
    print(f"# convention: {cost.convention}")
    print(cost.summary())
    out = _out_dir(args)
    if out is not None:
        (out / "cost.csv").write_text(cost.to_csv())
        report.save_cost_figure(cost, out / "cost.png")
    return 0


def _bench_scan(kernel, length, trials, rng):
    params = ssm.make_ssm_params(32, n_state=16, rng=rng, requires_grad=False)
    x = Tensor(rng.standard_normal((length, 32)).astype(np.float32))
    fn = ssm.selective_scan_seq if kernel == "scan_seq" else ssm.selective_scan_par
    times = []
    fn(x, params)  # warm up
    for _ in range(trials):
        t0 = time.perf_counter_ns()
        fn(x, params)
        times.append(time.perf_counter_ns() - t0)
    return int(np.median(times))


def _bench_attention(length, trials, rng):
    channels, heads = 16, 2
    w = blocks.AttentionWeights(
        w_q=Tensor(rng.standard_normal((channels, channels)).astype(np.float32)),
        w_k=Tensor(rng.standard_normal((channels, channels)).astype(np.float32)),
        w_v=Tensor(rng.standard_normal((channels, channels)).astype(np.float32)),
        w_o=Tensor(rng.standard_normal((channels, channels)).astype(np.float32)),
        heads=heads)
    x = Tensor(rng.standard_normal((length, channels)).astype(np.float32))
    times = []
    blocks.self_attention_forward(x, w)  # warm up
    for _ in range(trials):
        t0 = time.perf_counter_ns()
        blocks.self_attention_forward(x, w)
        times.append(time.perf_counter_ns() - t0)
    return int(np.median(times))


def bench_rows(trials=5, lengths=BENCH_LENGTHS, with_attention=True, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for length in lengths:
        rows.append((length, "scan_seq", _bench_scan("scan_seq", length, trials, rng)))
        rows.append((length, "scan_par", _bench_scan("scan_par", length, trials, rng)))
        if with_attention:
            rows.append((length, "attention", _bench_attention(length, trials, rng)))
    return rows


def doubling_ratios(rows, kernel, min_length=1024):
    by_len = {r[0]: r[2] for r in rows if r[1] == kernel}
    out = []
    for length in sorted(by_len):
        if length >= min_length and 2 * length in by_len:
            out.append((length, by_len[2 * length] / by_len[length]))
    return out


def cmd_bench(args):
    rows = bench_rows(trials=args.trials, seed=args.seed or 0)
    lines = ["L,kernel,median_ns"] + [f"{r[0]},{r[1]},{r[2]}" for r in rows]
    csv = "\n".join(lines) + "\n"
    sys.stdout.write(csv)

    ratio_lines = ["kernel,L,ratio,band_lo,band_hi,within"]
    for kernel, band in (("scan_seq", SCAN_RATIO_BAND), ("scan_par", SCAN_RATIO_BAND),
                         ("attention", ATTN_RATIO_BAND)):
        for length, ratio in doubling_ratios(rows, kernel):
            within = band[0] <= ratio <= band[1]
            flag = "ok" if within else "FLAG"
            print(f"{kernel}: t({2 * length})/t({length}) = {ratio:.2f} "
                  f"(expected {band[0]}..{band[1]}) {flag}")
            ratio_lines.append(f"{kernel},{length},{ratio:.4f},{band[0]},{band[1]},"
                               f"{str(within).lower()}")

    out = _out_dir(args)
    if out is not None:
        (out / "bench.csv").write_text(csv)
        (out / "bench_ratios.csv").write_text("\n".join(ratio_lines) + "\n")
        report.save_bench_figure(rows, out / "bench.png")
    return 0


def ablation_rows(base_cfg, samples, eval_extents, seed=0):
    """Cost plus evaluation rows for the baseline and all four variants."""
    rows = []
    base_weights = network.build(base_cfg, seed)
    baseline_logits = None
    fixed = samples[0]
    for variant in ("none", "conv3", "attention", "no-adjust", "no-residual"):
        cfg = network.apply_ablation(base_cfg, variant)
        if variant in ("no-adjust", "no-residual"):
            weights = {k: v for k, v in base_weights.items()
                       if not k.endswith(".s")}
        elif variant == "none":
            weights = base_weights
        else:
            weights = network.build(cfg, seed)
        cost = costs.count_flops(cfg, eval_extents)
        metrics = training.evaluate(weights, cfg, samples)
        logits = network.forward(weights, cfg,
                                 Tensor(data.znorm(fixed.image))).data
        if variant == "none":
            baseline_logits = logits
            diff = 0.0
        else:
            diff = float(np.max(np.abs(logits - baseline_logits)))
        rows.append({
            "variant": variant,
            "params": cost.total_params,
            "flops": cost.total_flops,
            "per_class_dsc": metrics.per_class_dsc,
            "per_class_iou": metrics.per_class_iou,
            "mean_dsc": metrics.mean_dsc,
            "miou": metrics.miou,
            "max_logit_diff_vs_baseline": diff,
        })
    return rows


def _ablate_csv(rows, num_classes):
    header = ["variant", "params", "flops"]
    header += [f"dsc_c{c}" for c in range(num_classes)]
    header += [f"iou_c{c}" for c in range(num_classes)]
    header += ["mean_dsc", "miou", "max_logit_diff_vs_baseline"]
    lines = [",".join(header)]
    for r in rows:
        cells = [r["variant"], str(r["params"]), str(r["flops"])]
        cells += [f"{v:.4f}" for v in r["per_class_dsc"]]
        cells += [f"{v:.4f}" for v in r["per_class_iou"]]
        cells += [f"{r['mean_dsc']:.4f}", f"{r['miou']:.4f}",
                  f"{r['max_logit_diff_vs_baseline']:.6g}"]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def cmd_ablate(args):
    file_cfg = _load_config_file(args.config)
    seed = args.seed or 0
    if args.data is not None:
        manifest = data.load_manifest(args.data)
        samples = data.load_samples(manifest)
        rank, classes = manifest.rank, manifest.num_classes
    else:
        rank = args.rank or 2
        classes = args.classes or 3
        size = args.size or 16
        samples = []
        for i in range(4):
            image, mask = data.generate_sample(seed, i, rank, (size,) * rank,
                                               classes)
            samples.append(data.Sample(image=image, mask=mask.astype(np.int64),
                                       id=f"s{i:04d}"))
    base_args = argparse.Namespace(rank=rank, classes=classes, ablation="none")
    base_cfg = _net_config(base_args, file_cfg, rank=rank, num_classes=classes,
                           in_channels=samples[0].image.shape[0])
    extents = samples[0].image.shape[1:]
    rows = ablation_rows(base_cfg, samples, extents, seed=seed)
    csv = _ablate_csv(rows, base_cfg.num_classes)
    sys.stdout.write(csv)
    out = _out_dir(args)
    if out is not None:
        (out / "ablate.csv").write_text(csv)
        report.save_ablation_figure(rows, out / "ablate.png")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lmunet",
        description="Lightweight state-space U-Net: data generation, training, "
                    "evaluation, cost auditing, and kernel benchmarks.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--seed", type=int, metavar="U64")
    common.add_argument("--threads", type=int, default=1, metavar="N")
    common.add_argument("--deterministic", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--rank", type=int, choices=(2, 3), default=2)
    p.add_argument("--size", type=int, default=64, help="extent per spatial axis")
    p.add_argument("--classes", type=int, default=3)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train on a dataset")
    p.add_argument("--data", required=True, metavar="MANIFEST")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--rank", type=int, choices=(2, 3))
    p.add_argument("--ablation", choices=sorted(_ABLATION_FLAG_TO_VARIANT))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--data", required=True, metavar="MANIFEST")
    p.add_argument("--weights", required=True, metavar="FILE")
    p.add_argument("--classes", type=int)
    p.add_argument("--rank", type=int, choices=(2, 3))
    p.add_argument("--ablation", choices=sorted(_ABLATION_FLAG_TO_VARIANT))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common],
                       help="write label maps and overlays")
    p.add_argument("--data", required=True, metavar="MANIFEST")
    p.add_argument("--weights", required=True, metavar="FILE")
    p.add_argument("--classes", type=int)
    p.add_argument("--rank", type=int, choices=(2, 3))
    p.add_argument("--ablation", choices=sorted(_ABLATION_FLAG_TO_VARIANT))
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("cost", parents=[common],
                       help="analytic parameter and FLOP audit")
    p.add_argument("--rank", type=int, choices=(2, 3))
    p.add_argument("--classes", type=int)
    p.add_argument("--size", type=int, help="input extent per axis "
                                            "(default 128 for 3D, 512 for 2D)")
    p.add_argument("--ablation", choices=sorted(_ABLATION_FLAG_TO_VARIANT))
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("bench", parents=[common],
                       help="time the scan kernels and attention")
    p.add_argument("--trials", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", parents=[common],
                       help="cost and evaluation for every architecture variant")
    p.add_argument("--data", metavar="MANIFEST")
    p.add_argument("--rank", type=int, choices=(2, 3))
    p.add_argument("--classes", type=int)
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.deterministic:
        ssm.set_num_threads(1)
    else:
        ssm.set_num_threads(args.threads)
    try:
        return args.func(args) or 0
    except (ConfigError, ContractError, DataError, LoadError, ParameterError,
            ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
