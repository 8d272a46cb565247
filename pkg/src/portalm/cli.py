"""Experiment orchestration CLI.

Subcommands: synth, train --stage {pretrain-lm,finetune-lm,train-clf},
predict, evaluate, report. Configuration comes from a TOML or JSON file;
command-line flags override config values. Exit codes: 0 success, 1
usage/config error, 2 degenerate-data flags present in an evaluation.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

import torch

from .corpus import Corpus, load_corpus, partition_speaker_disjoint, save_corpus
from .errors import ConfigError, PortalmError, ValidationError
from .finetune import (
    Classifier,
    ClassifierHead,
    FinetuneSchedule,
    _session_units,
    finetune_lm,
    train_classifier,
)
from .lm import LMConfig, bptt_batches, corpus_token_stream, train_lm, write_ppl_trace_csv
from .metrics import (
    MetricUndefinedError,
    age_threshold_sweep,
    bootstrap_ci,
    consistency_split_eval,
    eer_operating_point,
    join_predictions,
    load_predictions_csv,
    regression_errors,
    roc_auc,
    roc_curve,
    subgroup_report,
    write_predictions_csv,
    SUBGROUP_KEYS,
)
from .serialize import (
    load_classifier,
    load_lm,
    save_classifier,
    save_lm,
    sha256_file,
    utc_now_iso,
)
from .synth import SynthSpec, gp_sp_pair, generate_corpus

SEED_ENV_VAR = "PORTALM_SEED"


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    if p.suffix == ".json":
        with open(p, "r", encoding="utf-8") as f:
            return json.load(f)
    with open(p, "rb") as f:
        return tomllib.load(f)


def _global_seed(cfg: dict, args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in cfg:
        return int(cfg["seed"])
    return int(os.environ.get(SEED_ENV_VAR, "0"))


def _require(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"missing config field {dotted!r}")
        node = node[part]
    return node


def _out_dir(cfg: dict, args) -> Path:
    out = getattr(args, "out", None) or _require(cfg, "paths.out_dir")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _synth_spec(table: dict, seed: int, name: str) -> SynthSpec:
    table = dict(table)
    table.setdefault("seed", seed)
    table.setdefault("name", name)
    try:
        return SynthSpec.from_dict(table)
    except (TypeError, ValidationError) as e:
        raise ConfigError(f"bad synth spec [{name}]: {e}") from e


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    seed = _global_seed(cfg, args)
    out = _out_dir(cfg, args)
    synth_cfg = _require(cfg, "synth")
    kind = synth_cfg.get("kind", "pair")
    files: dict[str, Path] = {}
    specs: dict[str, dict] = {}
    if kind == "pair":
        spec_gp = _synth_spec(_require(cfg, "synth.gp"), seed, "gp")
        spec_sp = _synth_spec(_require(cfg, "synth.sp"), seed + 1, "sp")
        gp, sp = gp_sp_pair(spec_gp, spec_sp)
        fraction = float(synth_cfg.get("gp_test_fraction", 0.25))
        gp_train, gp_test = partition_speaker_disjoint(
            gp, fraction, int(synth_cfg.get("partition_seed", seed))
        )
        for tag, corpus in (("gp_train", gp_train), ("gp_test", gp_test), ("sp", sp)):
            files[tag] = out / f"{tag}.jsonl"
            save_corpus(corpus, files[tag])
        specs = {"gp": spec_gp.to_dict(), "sp": spec_sp.to_dict()}
        if "generic" in synth_cfg:
            spec_gen = _synth_spec(synth_cfg["generic"], seed + 2, "generic")
            files["generic"] = out / "generic.jsonl"
            save_corpus(generate_corpus(spec_gen), files["generic"])
            specs["generic"] = spec_gen.to_dict()
    elif kind == "single":
        spec = _synth_spec(_require(cfg, "synth.corpus"), seed, "corpus")
        files["corpus"] = out / "corpus.jsonl"
        save_corpus(generate_corpus(spec), files["corpus"])
        specs = {"corpus": spec.to_dict()}
    else:
        raise ConfigError(f"synth.kind must be 'pair' or 'single', got {kind!r}")
    manifest = {
        "kind": "synth_corpora",
        "seed": seed,
        "specs": specs,
        "files": {tag: sha256_file(p) for tag, p in files.items()},
        "created_at": utc_now_iso(),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    summary = {"command": "synth", "out_dir": str(out), "files": sorted(files)}
    print(json.dumps(summary) if args.json else f"synth: wrote {sorted(files)} to {out}")
    return 0


def _lm_config(cfg: dict, seed: int) -> LMConfig:
    table = dict(cfg.get("lm", {}))
    table.setdefault("seed", seed)
    try:
        return LMConfig.from_dict(table)
    except (TypeError, ValidationError) as e:
        raise ConfigError(f"bad [lm] config: {e}") from e


def _schedule(table: dict, steps_per_epoch: int, seed: int, defaults: dict) -> FinetuneSchedule:
    table = dict(table)
    epochs = table.pop("epochs", None)
    for key, value in defaults.items():
        table.setdefault(key, value)
    table.setdefault("seed", seed)
    if "total_steps" not in table:
        table["total_steps"] = max(1, int(epochs or 1)) * steps_per_epoch
    try:
        return FinetuneSchedule(**table)
    except (TypeError, ValidationError) as e:
        raise ConfigError(f"bad schedule config: {e}") from e


def _lm_steps_per_epoch(corpus: Corpus, config: LMConfig, vocab) -> int:
    stream = corpus_token_stream(corpus, vocab)
    n_cols = len(stream) // config.batch_size
    if n_cols < 2:
        raise ValidationError("corpus too small for LM batching")
    return math.ceil((n_cols - 1) / config.bptt_len)


def _corpus_path(cfg: dict, out: Path, key: str, default_name: str) -> Path:
    paths = cfg.get("paths", {})
    if key in paths:
        return Path(paths[key])
    return out / default_name


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    seed = _global_seed(cfg, args)
    out = _out_dir(cfg, args)
    torch.set_num_threads(1)
    if args.stage == "pretrain-lm":
        corpus_path = _corpus_path(cfg, out, "pretrain_corpus", "generic.jsonl")
        if not corpus_path.exists():
            corpus_path = _corpus_path(cfg, out, "train_corpus", "gp_train.jsonl")
        if not corpus_path.exists():
            raise ConfigError(
                f"no pretraining corpus found (looked for {corpus_path}); run synth first"
            )
        corpus = load_corpus(corpus_path, name="pretrain")
        config = _lm_config(cfg, seed)
        params, trace = train_lm(corpus, config)
        save_lm(params, out / "lm_pretrained")
        write_ppl_trace_csv(trace, out / "lm_pretrained.trace.csv")
        last = trace[-1] if trace else {}
        summary = {
            "command": "train", "stage": args.stage,
            "train_ppl": last.get("train_ppl"), "valid_ppl": last.get("valid_ppl"),
        }
    elif args.stage == "finetune-lm":
        pre_prefix = out / "lm_pretrained"
        if not pre_prefix.with_suffix(".json").exists():
            raise ValidationError(
                "missing lm_pretrained artifact; run train --stage pretrain-lm first"
            )
        pretrained = load_lm(pre_prefix)
        corpus = load_corpus(
            _corpus_path(cfg, out, "target_corpus", "gp_train.jsonl"), name="target"
        )
        steps = _lm_steps_per_epoch(corpus, pretrained.config, pretrained.vocab)
        sched = _schedule(
            cfg.get("finetune_lm", {}), steps, seed,
            defaults={"lr_max": 1.0, "gradual_unfreeze": False},
        )
        params = finetune_lm(pretrained, corpus, sched)
        save_lm(params, out / "lm_finetuned")
        summary = {"command": "train", "stage": args.stage, "steps": sched.total_steps}
    elif args.stage == "train-clf":
        ft_prefix = out / "lm_finetuned"
        if args.skip_finetune:
            ft_prefix = out / "lm_pretrained"
        if not ft_prefix.with_suffix(".json").exists():
            raise ValidationError(
                f"missing {ft_prefix.name} artifact; run the earlier train stages first "
                "(or pass --skip-finetune to build on the pretrained LM)"
            )
        encoder = load_lm(ft_prefix)
        corpus = load_corpus(
            _corpus_path(cfg, out, "train_corpus", "gp_train.jsonl"), name="labeled"
        )
        clf_cfg = dict(cfg.get("classifier", {}))
        task = clf_cfg.pop("task", "joint")
        text_mode = clf_cfg.pop("text_mode", "concatenate_responses")
        head = ClassifierHead(
            hidden_size=int(clf_cfg.pop("hidden_size", 50)),
            max_len=int(clf_cfg.pop("max_len", 400)),
        )
        n_units = sum(
            len(_session_units(s, encoder.vocab, text_mode, head.max_len))
            for s in corpus.sessions()
        )
        batch = int(clf_cfg.get("batch_size", 16))
        steps = math.ceil(n_units / batch)
        sched = _schedule(clf_cfg, steps, seed, defaults={"lr_max": 0.5})
        clf = train_classifier(encoder, head, corpus, sched, task=task, text_mode=text_mode)
        save_classifier(clf, out / "clf")
        summary = {
            "command": "train", "stage": args.stage,
            "steps": sched.total_steps, "task": task,
        }
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown stage {args.stage!r}")
    print(json.dumps(summary) if args.json else f"train {args.stage}: done ({summary})")
    return 0


def cmd_predict(args) -> int:
    torch.set_num_threads(1)
    clf = load_classifier(args.model)
    corpus = load_corpus(args.corpus, name="predict")
    from .finetune import predict_corpus

    records = predict_corpus(clf, corpus, mode=args.mode)
    write_predictions_csv(records, args.out)
    summary = {"command": "predict", "n_records": len(records), "out": str(args.out)}
    print(json.dumps(summary) if args.json else f"predict: {len(records)} records -> {args.out}")
    return 0


def _parse_sweep(text: str) -> list[int]:
    try:
        lo, hi, step = (int(x) for x in text.split(":"))
        if step < 1 or hi < lo:
            raise ValueError
    except ValueError:
        raise ConfigError(f"bad sweep spec {text!r}; expected lo:hi:step") from None
    return list(range(lo, hi + 1, step))


def _write_rows_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _flatten_sweep(points) -> list[dict]:
    return [
        {
            "threshold": p.threshold,
            "below_size": p.below.size, "below_auc": p.below.auc, "below_flag": p.below.flag,
            "beyond_size": p.beyond.size, "beyond_auc": p.beyond.auc, "beyond_flag": p.beyond.flag,
        }
        for p in points
    ]


def cmd_evaluate(args) -> int:
    corpus = load_corpus(args.corpus, name="evaluate")
    records = join_predictions(load_predictions_csv(args.predictions), corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    flags: list[str] = []
    evaluation: dict = {"n_records": len(records)}

    global_row: dict = {"n": len(records)}
    try:
        global_row["auc"] = roc_auc(records)
        op = eer_operating_point(records)
        global_row.update(
            eer_threshold=op.threshold, spec_at_eer=op.specificity, sens_at_eer=op.sensitivity
        )
        curve = roc_curve(records)
        _write_rows_csv(
            out / "roc_curve.csv",
            [{"fpr": p.fpr, "tpr": p.tpr, "threshold": p.threshold} for p in curve],
        )
    except MetricUndefinedError as e:
        global_row["auc"] = None
        global_row["flag"] = str(e)
        flags.append(f"global: {e}")
        curve = None
    if all(r.phq_estimate is not None for r in records):
        rmse, mae = regression_errors(records)
        global_row.update(rmse=rmse, mae=mae)
    evaluation["global"] = global_row

    evaluation["subgroups"] = {}
    for key in SUBGROUP_KEYS:
        report = subgroup_report(records, key)
        evaluation["subgroups"][key] = report.as_dict()
        _write_rows_csv(out / f"subgroup_{key}.csv", [r.as_dict() for r in report.rows])
        flags.extend(f"{key}/{row.group}: {row.flag}" for row in report.rows if row.flag)

    split = consistency_split_eval(records)
    evaluation["consistency_split"] = split.as_dict()
    for name, side in (("consistent", split.consistent), ("inconsistent", split.inconsistent)):
        if side.flag:
            flags.append(f"consistency/{name}: {side.flag}")

    evaluation["age_sweep"] = None
    if args.sweep:
        points = age_threshold_sweep(records, _parse_sweep(args.sweep))
        evaluation["age_sweep"] = [p.as_dict() for p in points]
        _write_rows_csv(out / "age_sweep.csv", _flatten_sweep(points))

    evaluation["bootstrap"] = None
    if args.bootstrap:
        metrics = ["auc"] if global_row.get("auc") is not None else []
        if "rmse" in global_row:
            metrics += ["rmse", "mae"]
        cis = {}
        for metric in metrics:
            ci = bootstrap_ci(
                records, metric, n_resamples=args.bootstrap, alpha=args.alpha, seed=args.seed or 0
            )
            cis[metric] = {"lower": ci.lower, "upper": ci.upper, "n_redrawn": ci.n_redrawn}
        evaluation["bootstrap"] = cis

    evaluation["flags"] = flags
    with open(out / "evaluation.json", "w", encoding="utf-8") as f:
        json.dump(evaluation, f, sort_keys=True, indent=1)
        f.write("\n")

    if args.plots:
        _emit_plots(out, curve, evaluation)
    if args.json:
        print(json.dumps({"command": "evaluate", "out": str(out),
                          "auc": global_row.get("auc"), "flags": flags}))
    else:
        print(f"evaluate: global AUC {global_row.get('auc')}, {len(flags)} flags -> {out}")
    return 2 if flags else 0


def _emit_plots(out: Path, curve, evaluation: dict) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:  # pragma: no cover
        print("plots requested but matplotlib is unavailable", file=sys.stderr)
        return
    if curve is not None:
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot([p.fpr for p in curve], [p.tpr for p in curve])
        ax.plot([0, 1], [0, 1], linestyle=":", color="gray")
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        fig.tight_layout()
        fig.savefig(out / "roc.png")
        plt.close(fig)
    sweep = evaluation.get("age_sweep")
    if sweep:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        xs = [p["threshold"] for p in sweep]
        ax.plot(xs, [p["below"]["auc"] for p in sweep], marker="o", label="below age")
        ax.plot(xs, [p["beyond"]["auc"] for p in sweep], marker="s", label="beyond age")
        ax.set_xlabel("age threshold")
        ax.set_ylabel("ROC AUC")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "age_sweep.png")
        plt.close(fig)


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


def cmd_report(args) -> int:
    with open(args.evaluation, "r", encoding="utf-8") as f:
        evaluation = json.load(f)
    g = evaluation["global"]
    print(f"records: {evaluation['n_records']}")
    print(
        f"global: AUC {_fmt(g.get('auc'))}  spec@EER {_fmt(g.get('spec_at_eer'))}  "
        f"sens@EER {_fmt(g.get('sens_at_eer'))}  RMSE {_fmt(g.get('rmse'))}  "
        f"MAE {_fmt(g.get('mae'))}"
    )
    for key, report in evaluation["subgroups"].items():
        print(f"\nby {key} (missing: {report['missing_key_count']}):")
        for row in report["rows"]:
            line = (
                f"  {row['group']:<16} n={row['size']:<5} AUC {_fmt(row['auc'])}"
                f"  spec {_fmt(row['spec_at_eer'])}  sens {_fmt(row['sens_at_eer'])}"
            )
            if row.get("flag"):
                line += f"  [{row['flag']}]"
            print(line)
    split = evaluation.get("consistency_split")
    if split:
        print("\nconsistency split:")
        for name in ("consistent", "inconsistent"):
            side = split[name]
            print(f"  {name:<14} n={side['size']:<5} AUC {_fmt(side['auc'])}"
                  + (f"  [{side['flag']}]" if side.get("flag") else ""))
    if evaluation.get("age_sweep"):
        print("\nage threshold sweep:")
        for p in evaluation["age_sweep"]:
            print(
                f"  <{p['threshold']:>3}: n={p['below']['size']:<5} AUC {_fmt(p['below']['auc'])}"
                f"   >={p['threshold']:>3}: n={p['beyond']['size']:<5} "
                f"AUC {_fmt(p['beyond']['auc'])}"
            )
    if evaluation.get("flags"):
        print(f"\nflags ({len(evaluation['flags'])}):")
        for flag in evaluation["flags"]:
            print(f"  {flag}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # return exit code 1 on usage errors, not 2
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="portalm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate synthetic corpora")
    p_synth.add_argument("--config", required=True)
    p_synth.add_argument("--out", help="override paths.out_dir")
    p_synth.add_argument("--seed", type=int)
    p_synth.add_argument("--json", action="store_true")
    p_synth.set_defaults(fn=cmd_synth)

    p_train = sub.add_parser("train", help="run a training stage")
    p_train.add_argument("--config", required=True)
    p_train.add_argument(
        "--stage", required=True, choices=["pretrain-lm", "finetune-lm", "train-clf"]
    )
    p_train.add_argument("--out", help="override paths.out_dir")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--skip-finetune", action="store_true",
                         help="train-clf directly on the pretrained LM")
    p_train.add_argument("--json", action="store_true")
    p_train.set_defaults(fn=cmd_train)

    p_pred = sub.add_parser("predict", help="score a corpus with a trained classifier")
    p_pred.add_argument("--model", required=True, help="classifier artifact prefix")
    p_pred.add_argument("--corpus", required=True)
    p_pred.add_argument("--out", required=True)
    p_pred.add_argument("--mode", choices=["concatenate_responses", "per_response"])
    p_pred.add_argument("--json", action="store_true")
    p_pred.set_defaults(fn=cmd_predict)

    p_eval = sub.add_parser("evaluate", help="stratified portability reports")
    p_eval.add_argument("--predictions", required=True)
    p_eval.add_argument("--corpus", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--sweep", help="age threshold sweep, lo:hi:step")
    p_eval.add_argument("--bootstrap", type=int, default=0,
                        help="bootstrap resamples for CIs (0 = off)")
    p_eval.add_argument("--alpha", type=float, default=0.1)
    p_eval.add_argument("--seed", type=int)
    p_eval.add_argument("--plots", action="store_true")
    p_eval.add_argument("--json", action="store_true")
    p_eval.set_defaults(fn=cmd_evaluate)

    p_rep = sub.add_parser("report", help="pretty-print an evaluation")
    p_rep.add_argument("--evaluation", required=True, help="path to evaluation.json")
    p_rep.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except PortalmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
