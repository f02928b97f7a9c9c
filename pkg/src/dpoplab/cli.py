"""Command-line entry point: forge, train, gradcheck, analyze, ablate.

Every command reads one JSON experiment config (``--config``), writes its
artifacts under ``output_dir`` with fixed names, and copies the resolved config
to ``config.resolved``.  Errors end with a single JSON line on stderr and a
nonzero exit code.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dataforge import GENERATORS, dataset_stats, read_jsonl, write_jsonl, write_stats_csv
from .exceptions import (ConfigError, ContractError, DatasetParseError, DimensionError,
                         NumericError, TokenizationError, TrainingDiverged)
from .losses import KINDS, LossConfig, batch_loss
from .model import LMConfig, init_params, load_checkpoint, save_checkpoint, snapshot_reference
from .theory import (_rows_from_logits, dpo_logit_grad, dpop_logit_grad, min_dominating_lambda,
                     prefix_gradient, verify_eq2_against_autodiff)
from .trainer import (TrainConfig, mean_after_edit, position_profile, run_ablation,
                      run_preference_opt, run_sft, write_ablation_csv, write_metrics_csv)

logger = logging.getLogger("dpoplab")

DATASET, STATS, STATS_SUMMARY = "dataset.jsonl", "stats.csv", "stats_summary.csv"
METRICS, PROFILE, REPORT, RESOLVED = "metrics.csv", "profile.csv", "report.csv", "config.resolved"
REFERENCE, POLICY, ABLATION, SUMMARY = "reference.ckpt", "policy.ckpt", "ablation.csv", "summary.json"


# ----------------------------------------------------------------------------
# config

@dataclass
class DataConfig:
    generator: str = "calc_chain"
    n_pairs: int = 1000
    seed: int = 0
    params: dict = field(default_factory=dict)
    path: str = None

    def __post_init__(self):
        if self.path is None and self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}; valid generators: "
                              f"{', '.join(sorted(GENERATORS))}")
        if self.n_pairs < 1:
            raise ConfigError("data.n_pairs must be positive")


@dataclass
class ExperimentConfig:
    model: LMConfig = field(default_factory=LMConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"
    init_checkpoint: str = None
    analyze: dict = field(default_factory=lambda: {"window": 5, "n_pairs": 900})
    ablate: dict = field(default_factory=dict)

    _SECTIONS = ("model", "data", "train", "output_dir", "init_checkpoint", "analyze", "ablate")

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(cls._SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        data = dict(d.get("data", {}))
        bad = set(data) - set(DataConfig.__dataclass_fields__)
        if bad:
            raise ConfigError(f"unknown data config fields: {sorted(bad)}")
        analyze = {"window": 5, "n_pairs": 900, **d.get("analyze", {})}
        if set(analyze) - {"window", "n_pairs"}:
            raise ConfigError(f"unknown analyze fields: {sorted(set(analyze) - {'window', 'n_pairs'})}")
        ablate = dict(d.get("ablate", {}))
        if set(ablate) - {"beta", "lambda"}:
            raise ConfigError(f"unknown ablate fields: {sorted(set(ablate) - {'beta', 'lambda'})}")
        return cls(model=LMConfig.from_dict(d.get("model", {})), data=DataConfig(**data),
                   train=TrainConfig.from_dict(d.get("train", {})),
                   output_dir=str(d.get("output_dir", "runs/default")),
                   init_checkpoint=d.get("init_checkpoint"), analyze=analyze, ablate=ablate)

    def to_dict(self):
        return {"model": self.model.to_dict(),
                "data": {"generator": self.data.generator, "n_pairs": self.data.n_pairs,
                         "seed": self.data.seed, "params": self.data.params, "path": self.data.path},
                "train": self.train.to_dict(), "output_dir": self.output_dir,
                "init_checkpoint": self.init_checkpoint, "analyze": self.analyze,
                "ablate": self.ablate}


def load_config(path, out=None, seed=None):
    if path is None:
        d = {}
    else:
        try:
            with open(path, encoding="utf-8") as f:
                d = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
    cfg = ExperimentConfig.from_dict(d)
    if out is not None:
        cfg.output_dir = out
    if seed is not None:
        cfg.train = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed})
    return cfg


def _write_resolved(cfg):
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, RESOLVED), "w", encoding="utf-8", newline="\n") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def _out(cfg, name):
    return os.path.join(cfg.output_dir, name)


# ----------------------------------------------------------------------------
# shared steps

def forge_pairs(data_cfg):
    gen = GENERATORS[data_cfg.generator]
    params = dict(data_cfg.params)
    if data_cfg.generator == "multiple_choice":
        per_q = params.get("n_options", 4) - 1
        return gen(math.ceil(data_cfg.n_pairs / per_q), data_cfg.seed, **params)[:data_cfg.n_pairs]
    return gen(data_cfg.n_pairs, data_cfg.seed, **params)


def _write_stats(cfg, pairs):
    stats = dataset_stats(pairs)
    write_stats_csv(stats, _out(cfg, STATS))
    with open(_out(cfg, STATS_SUMMARY), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["statistic", "value"])
        for k, v in stats.summary().items():
            w.writerow([k, repr(v) if isinstance(v, float) else v])
    return stats


def _dataset(cfg):
    """Load ``data.path`` or forge into ``output_dir``; fails before any training."""
    if cfg.data.path is not None:
        if not os.path.isfile(cfg.data.path):
            raise ContractError(f"dataset not found: {cfg.data.path}")
        return read_jsonl(cfg.data.path)
    pairs = forge_pairs(cfg.data)
    write_jsonl(pairs, _out(cfg, DATASET))
    _write_stats(cfg, pairs)
    return pairs


def _starting_model(cfg, pairs):
    """SFT reference: loaded from ``init_checkpoint`` or trained from scratch."""
    if cfg.init_checkpoint is not None:
        if not os.path.isfile(cfg.init_checkpoint):
            raise ContractError(f"init checkpoint not found: {cfg.init_checkpoint}")
        params = load_checkpoint(cfg.init_checkpoint)
    else:
        logger.info("SFT for %d steps", cfg.train.sft_steps)
        params = run_sft(init_params(cfg.model, cfg.train.seed), pairs, cfg.train,
                         out_dir=cfg.output_dir)
    save_checkpoint(params, _out(cfg, REFERENCE))
    return params


# ----------------------------------------------------------------------------
# commands

def cmd_forge(cfg, args):
    _write_resolved(cfg)
    pairs = forge_pairs(cfg.data)
    write_jsonl(pairs, _out(cfg, DATASET))
    stats = _write_stats(cfg, pairs)
    for k, v in stats.summary().items():
        print(f"{k:28s} {v:.6g}" if isinstance(v, float) else f"{k:28s} {v}")
    return 0


def cmd_train(cfg, args):
    if cfg.data.path is not None and not os.path.isfile(cfg.data.path):
        raise ContractError(f"dataset not found: {cfg.data.path}")
    if args.dry_run:
        print(json.dumps({"plan": {
            "output_dir": cfg.output_dir,
            "dataset": cfg.data.path or f"forge {cfg.data.generator} x{cfg.data.n_pairs} seed {cfg.data.seed}",
            "reference": cfg.init_checkpoint or f"SFT {cfg.train.sft_steps} steps",
            "loss": cfg.train.loss.to_dict(), "steps": cfg.train.max_steps,
            "artifacts": [REFERENCE, POLICY, METRICS, RESOLVED]}}, indent=2, sort_keys=True))
        return 0
    _write_resolved(cfg)
    pairs = _dataset(cfg)
    start = _starting_model(cfg, pairs)
    policy, records = run_preference_opt(start, pairs, cfg.train, out_dir=cfg.output_dir,
                                         on_record=lambda r: logger.info(
                                             "step %d loss %.4f chosen %.4f acc %.3f", r.step,
                                             r.train_loss, r.mean_chosen_logprob,
                                             r.preference_accuracy))
    save_checkpoint(policy, _out(cfg, POLICY))
    write_metrics_csv(records, _out(cfg, METRICS))
    first, last = records[0], records[-1]
    print(f"mean_chosen_logprob  step {first.step}: {first.mean_chosen_logprob:.4f}  "
          f"step {last.step}: {last.mean_chosen_logprob:.4f}")
    print(f"preference_accuracy  step {first.step}: {first.preference_accuracy:.4f}  "
          f"step {last.step}: {last.preference_accuracy:.4f}")
    return 0


def gradcheck_checks(n_pairs=20, seed=0, sign_flip=False):
    """Run the gradient checks; yields ``(check, target, value, tolerance, passed)`` rows."""
    from .dataforge import PreferencePair
    cfg = LMConfig(vocab_size=16, d_model=32, n_layers=1, n_heads=2, max_seq_len=16)
    rng = np.random.default_rng(seed)
    theta = init_params(cfg, seed)
    ref_src = init_params(cfg, seed + 1)
    for p in (theta, ref_src):
        for t in p.values():
            t.data += rng.normal(0.0, 0.3, size=t.shape)
    ref = snapshot_reference(ref_src)

    def pair(i):
        x = rng.integers(0, 16, size=int(rng.integers(2, 5)))
        y = rng.integers(0, 16, size=int(rng.integers(3, 8)))
        m = int(rng.integers(0, y.size))
        yl = y.copy()
        yl[m] = (y[m] + int(rng.integers(1, 16))) % 16
        return PreferencePair(x, y, yl, first_edit_index=m, id=i)

    pairs = [pair(i) for i in range(n_pairs)]
    analytic = (lambda r: -dpo_logit_grad(r)) if sign_flip else dpo_logit_grad
    rows = []
    for kind in KINDS:
        lc = LossConfig(kind, lam=5.0)
        err = ad.grad_check(lambda: batch_loss(theta, ref, pairs[:4], lc).loss, theta.values(),
                            eps=1e-5, max_coords=40, seed=seed)
        rows.append((f"grad_check_{kind}", "model parameters", err, 1e-5, err <= 1e-5))
    for p in pairs:
        worst = max(verify_eq2_against_autodiff(theta, p, k, analytic=analytic)
                    for k in range(len(p.chosen)) if k != p.first_edit_index) \
            if len(p.chosen) > 1 else 0.0
        rows.append(("logit_grad_vs_autodiff", f"pair {p.id}", worst, 1e-8, worst <= 1e-8))
        prefix = max((float(np.max(np.abs(prefix_gradient(theta, p, k))))
                      for k in range(p.first_edit_index)), default=0.0)
        rows.append(("shared_prefix_zero", f"pair {p.id}", prefix, 0.0, prefix == 0.0))
    bad = 0
    for _ in range(200):
        rows_ = _rows_from_logits(rng.normal(size=8) * 2, rng.normal(size=8) * 2, int(rng.integers(8)))
        g = dpop_logit_grad(rows_, 2.0 * min_dominating_lambda(rows_), True)
        t = rows_.target_index
        bad += not (g[t] > 0 and np.all(np.delete(g, t) < 0))
    rows.append(("dominating_lambda_signs", "200 random rows", float(bad), 0.0, bad == 0))
    return rows


def cmd_gradcheck(cfg, args):
    _write_resolved(cfg)
    rows = gradcheck_checks(seed=cfg.train.seed, sign_flip=args.inject_sign_flip)
    with open(_out(cfg, REPORT), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["check", "target", "value", "tolerance", "passed"])
        for name, target, value, tol, ok in rows:
            w.writerow([name, target, repr(float(value)), repr(float(tol)), int(ok)])
    by_check = {}
    for name, _, value, _, ok in rows:
        n, p, worst = by_check.get(name, (0, 0, 0.0))
        by_check[name] = (n + 1, p + ok, max(worst, float(value)))
    print(f"{'check':26s} {'passed':>9s} {'worst':>12s}")
    for name, (n, p, worst) in by_check.items():
        print(f"{name:26s} {p:>4d}/{n:<4d} {worst:12.3e}")
    failed = sum(not r[4] for r in rows)
    print(f"{len(rows) - failed}/{len(rows)} checks passed")
    return 0 if failed == 0 else 1


def _analyze_inputs(cfg, args):
    ckpt = args.checkpoint or _out(cfg, POLICY)
    ref = args.reference or (_out(cfg, REFERENCE) if os.path.isfile(_out(cfg, REFERENCE)) else None)
    data = args.dataset or cfg.data.path or _out(cfg, DATASET)
    for path, what in ((ckpt, "checkpoint"), (data, "dataset")):
        if not os.path.isfile(path):
            raise ContractError(f"{what} not found: {path}")
    return ckpt, ref, data


def cmd_analyze(cfg, args):
    ckpt, ref_path, data_path = _analyze_inputs(cfg, args)
    pairs = read_jsonl(data_path)
    if any(p.first_edit_index is None for p in pairs):
        raise ContractError("dataset has pairs without first_edit_index; forge one with the "
                            "calc_chain generator for the position analysis")
    pairs = pairs[:cfg.analyze["n_pairs"]]
    window = cfg.analyze["window"]
    _write_resolved(cfg)
    summary = {}
    models = [("policy", ckpt)] + ([("reference", ref_path)] if ref_path else [])
    for name, path in models:
        params = load_checkpoint(path)
        prof = position_profile(params, pairs, window=window)
        prof.write_csv(_out(cfg, PROFILE if name == "policy" else "reference_profile.csv"))
        summary[name] = {"after_edit_profile_mean": prof.mean_over(1, window),
                         "after_edit_chosen_logprob": mean_after_edit(params, pairs, "chosen"),
                         "after_edit_rejected_logprob": mean_after_edit(params, pairs, "rejected")}
    if ref_path:
        drop = summary["policy"]["after_edit_profile_mean"] < summary["reference"]["after_edit_profile_mean"]
        summary["after_edit_drop"] = bool(drop)
    with open(_out(cfg, SUMMARY), "w", encoding="utf-8", newline="\n") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    for name in (m[0] for m in models):
        s = summary[name]
        print(f"{name:10s} profile(+1..+{window}) {s['after_edit_profile_mean']:+.4f}  "
              f"chosen-after-edit {s['after_edit_chosen_logprob']:+.4f}")
    if "after_edit_drop" in summary:
        print(f"after-edit drop vs reference: {'yes' if summary['after_edit_drop'] else 'no'}")
    return 0


def cmd_ablate(cfg, args):
    if not cfg.ablate.get("beta") and not cfg.ablate.get("lambda"):
        raise ConfigError("ablate needs a non-empty 'beta' or 'lambda' list in the config")
    if args.dry_run:
        print(json.dumps({"plan": {"grid": cfg.ablate, "loss": cfg.train.loss.kind,
                                   "steps": cfg.train.max_steps}}, sort_keys=True))
        return 0
    _write_resolved(cfg)
    pairs = _dataset(cfg)
    start = _starting_model(cfg, pairs)
    results = run_ablation(cfg.ablate, cfg.train, pairs, start)
    write_ablation_csv(results, _out(cfg, ABLATION))
    for beta, lam, records in results:
        print(f"beta={beta:<6g} lambda={lam:<6g} chosen {records[0].mean_chosen_logprob:+.4f} -> "
              f"{records[-1].mean_chosen_logprob:+.4f}")
    return 0


COMMANDS = {"forge": cmd_forge, "train": cmd_train, "gradcheck": cmd_gradcheck,
            "analyze": cmd_analyze, "ablate": cmd_ablate}


def build_parser():
    parser = argparse.ArgumentParser(prog="dpoplab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--out", help="override output_dir")
        p.add_argument("--seed", type=int, help="override the training seed")
        p.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
        if name == "gradcheck":
            p.add_argument("--inject-sign-flip", action="store_true", help=argparse.SUPPRESS)
        if name == "analyze":
            p.add_argument("--checkpoint", help="policy checkpoint (default: output_dir/policy.ckpt)")
            p.add_argument("--reference", help="reference checkpoint to compare against")
            p.add_argument("--dataset", help="JSONL dataset (default: output_dir/dataset.jsonl)")
    return parser


_EXIT = {ConfigError: 2, ContractError: 3, DatasetParseError: 3, TokenizationError: 3,
         TrainingDiverged: 4, NumericError: 4, DimensionError: 3}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.out, args.seed)
        if args.dry_run and args.command not in ("train", "ablate"):
            print(json.dumps({"plan": {"command": args.command, "config": cfg.to_dict()}},
                             indent=2, sort_keys=True))
            return 0
        return COMMANDS[args.command](cfg, args)
    except tuple(_EXIT) as e:
        code = next(c for t, c in _EXIT.items() if isinstance(e, t))
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
