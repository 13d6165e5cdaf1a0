"""Command-line entry point: ``a2xp adapt|generalize|evaluate|ablate|analyze``.

Every command reads one JSON config and writes under a single run
directory.  Exit codes: 0 success, 2 configuration or input error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ExperimentConfig, load_config
from .errors import (CacheInvalid, ConfigurationError, DatasetError, DegenerateExpert, InconsistentClasses,
                     NumericalFailure)
from .evaluation import (FLOAT, SourceMatrix, attention_report, baseline_accuracy, count_parameters,
                         evaluate_accuracy, export_features, memory_report, prompt_size)
from .experiment import Pipeline, SplitRun, mixer_config
from .mixer import MixerConfig, embed_experts, write_attention_csv
from .generalization import build_heads, write_curve_csv
from .prompts import ExpertBank, load_prompt, save_prompt, tensor_digest

log = logging.getLogger("a2xp")


class MissingArtifact(ConfigurationError):
    """An upstream command's output is not in the run directory."""


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return FLOAT.format(v)
    return str(v)


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _file_sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _record_outputs(run_dir: Path, command: str, paths: list[Path]) -> None:
    """Add ``command``'s outputs and their checksums to the run manifest."""
    manifest_path = run_dir / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.is_file() else {"commands": {}}
    manifest["commands"][command] = {str(p.relative_to(run_dir)): _file_sha(p) for p in sorted(paths)}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _split_dir(run_dir: Path, seed: int, target: str) -> Path:
    return run_dir / f"seed_{seed}" / target


def _pipeline(cfg: ExperimentConfig, run_dir: Path, seed: int, jobs: int = 1) -> Pipeline:
    return Pipeline(cfg, seed, jobs=jobs, log=log.info, cache_dir=run_dir / "cache")


# --------------------------------------------------------------------------
# adapt
# --------------------------------------------------------------------------

def cmd_adapt(cfg: ExperimentConfig, run_dir: Path, jobs: int = 1) -> list[Path]:
    outputs = []
    for seed in cfg.seeds:
        pipe = _pipeline(cfg, run_dir, seed, jobs)
        for target, split in pipe.splits.items():
            out = _split_dir(run_dir, seed, target) / "experts"
            out.mkdir(parents=True, exist_ok=True)
            entries = []
            meta_entry = None
            if cfg.init == "meta":
                meta = pipe.meta_prompt(target)
                save_prompt(out / "meta.pt", meta.prompt, init_strategy="zero", domain_name="pooled_sources",
                            seed=seed, update_count=meta.steps)
                meta_entry = {"file": "meta.pt", "digest": tensor_digest(meta.prompt.values)}
            for dom, res in zip(split.sources, pipe.experts(target)):
                path = out / f"{dom.name}.pt"
                save_prompt(path, res.prompt, init_strategy=cfg.init, domain_name=dom.name, seed=seed,
                            update_count=res.steps)
                entries.append({"domain": dom.name, "file": path.name, "update_count": res.steps,
                                "final_loss": _fmt(res.final_loss), "norm": _fmt(res.prompt.norm()),
                                "digest": tensor_digest(res.prompt.values)})
                _write_rows(out / f"{dom.name}_losses.csv", ["step", "loss"],
                            [[i, v] for i, v in enumerate(res.losses)])
                outputs.append(out / f"{dom.name}_losses.csv")
            manifest = {"seed": seed, "target": target, "init": cfg.init, "experts": entries, "meta": meta_entry,
                        "budget": cfg.budget_adapt, "lr": cfg.lr_adapt, "momentum": cfg.momentum}
            (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
            outputs.append(out / "manifest.json")
    return outputs


def _load_experts(run_dir: Path, seed: int, target: str, sources: list[str]):
    path = _split_dir(run_dir, seed, target) / "experts" / "manifest.json"
    if not path.is_file():
        raise MissingArtifact(f"expert manifest {path} not found; run 'a2xp adapt' first")
    manifest = json.loads(path.read_text())
    by_domain = {e["domain"]: e for e in manifest["experts"]}
    prompts = []
    for name in sources:
        if name not in by_domain:
            raise MissingArtifact(f"expert for domain {name!r} missing from {path}")
        prompt, _ = load_prompt(path.parent / by_domain[name]["file"])
        if tensor_digest(prompt.values) != by_domain[name]["digest"]:
            raise CacheInvalid(f"expert checkpoint for {name!r} does not match its manifest digest")
        prompts.append(prompt)
    return prompts


# --------------------------------------------------------------------------
# generalize
# --------------------------------------------------------------------------

def _save_run(path: Path, run: SplitRun, cfg: ExperimentConfig) -> None:
    payload = {
        "head_T": {k: v.detach().clone() for k, v in run.heads.head_T.state_dict().items()},
        "head_E": {k: v.detach().clone() for k, v in run.heads.head_E.state_dict().items()},
        "bank_values": run.bank.values.detach().clone(),
        "mixer": [run.mixer.use_expert_norm, run.mixer.use_tanh, run.mixer.use_softmax],
        "tuning_mode": run.net.tuning_mode,
        "net": ({k: v.detach().clone() for k, v in run.net.state_dict().items()}
                if run.net.tuning_mode != "frozen" else {}),
    }
    torch.save(payload, str(path))


def _load_run(pipe: Pipeline, run_dir: Path, target: str) -> SplitRun:
    path = _split_dir(run_dir, pipe.seed, target) / "heads.pt"
    if not path.is_file():
        raise MissingArtifact(f"heads checkpoint {path} not found; run 'a2xp generalize' first")
    payload = torch.load(str(path), map_location="cpu", weights_only=True)
    mixer = MixerConfig(*[bool(v) for v in payload["mixer"]])
    net = pipe.objective(target, payload["tuning_mode"])
    if payload["net"]:
        net.load_state_dict(payload["net"])
    emb, fdim = pipe.embedder(target)
    heads = build_heads(emb, fdim, init_scale=pipe.cfg.head_init_scale)
    heads.head_T.load_state_dict(payload["head_T"])
    heads.head_E.load_state_dict(payload["head_E"])
    bank = ExpertBank(payload["bank_values"], pipe.splits[target].source_names, pipe.cfg.border_width,
                      normalized=mixer.use_expert_norm)
    embed_experts(heads, bank)
    return SplitRun(target, net, bank, heads, mixer)


def cmd_generalize(cfg: ExperimentConfig, run_dir: Path, jobs: int = 1) -> list[Path]:
    outputs = []
    for seed in cfg.seeds:
        pipe = _pipeline(cfg, run_dir, seed, jobs)
        for target, split in pipe.splits.items():
            prompts = _load_experts(run_dir, seed, target, split.source_names)
            run = pipe.generalize(target, prompts=prompts, tuning_mode=cfg.tuning_mode)
            out = _split_dir(run_dir, seed, target)
            _save_run(out / "heads.pt", run, cfg)
            write_curve_csv(run.generalization.curve, out / "curve.csv")
            manifest = {"seed": seed, "target": target, "mixer": run.mixer.label, "tuning_mode": cfg.tuning_mode,
                        "tune_experts": cfg.tune_experts, "budget": cfg.budget_generalize, "lr": cfg.lr_generalize,
                        "updates": run.generalization.steps, "bank_digest": run.bank.digest(),
                        "heads_digest": tensor_digest(*run.heads.head_T.state_dict().values(),
                                                      *run.heads.head_E.state_dict().values())}
            (out / "generalize_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
            outputs += [out / "curve.csv", out / "generalize_manifest.json"]
    return outputs


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------

def _summary_rows(rows: list[dict], targets: list[str], methods: list[str]) -> list[list]:
    out = []
    for m in methods:
        means = [float(np.mean([r[m] for r in rows if r["target"] == t])) for t in targets]
        out.append([m] + means + [float(np.mean(means))])
    return out


def cmd_evaluate(cfg: ExperimentConfig, run_dir: Path, jobs: int = 1) -> list[Path]:
    rows, outputs, targets = [], [], []
    for seed in cfg.seeds:
        pipe = _pipeline(cfg, run_dir, seed, jobs)
        targets = list(pipe.splits)
        cells = {}
        for target in pipe.splits:
            run = _load_run(pipe, run_dir, target)
            rows.append(pipe.target_row(run))
            for r in pipe.source_rows(run):
                cells[(target, r["domain"])] = r["a2xp"]
        matrix = SourceMatrix(targets, cells)
        path = run_dir / f"source_matrix_seed{seed}.csv"
        matrix.write_csv(path)
        outputs.append(path)
    methods = ["a2xp", "no_prompt", "random_expert"]
    path = run_dir / "target_accuracy.csv"
    _write_rows(path, ["seed", "target"] + methods, [[r["seed"], r["target"]] + [r[m] for m in methods] for r in rows])
    summary = run_dir / "target_summary.csv"
    _write_rows(summary, ["method"] + targets + ["Avg."], _summary_rows(rows, targets, methods))
    return outputs + [path, summary]


# --------------------------------------------------------------------------
# ablate
# --------------------------------------------------------------------------

INIT_GRID = ("zero", "uniform", "normal", "meta")
TUNING_GRID = (("FT", "full_tune", False), ("LP", "linear_probe", False),
               ("A2XP+FT", "full_tune", True), ("A2XP+LP", "linear_probe", True))


def cmd_ablate(cfg: ExperimentConfig, run_dir: Path, jobs: int = 1) -> list[Path]:
    rows = []
    targets: list[str] = []
    for seed in cfg.seeds:
        pipe = _pipeline(cfg, run_dir, seed, jobs)
        targets = list(pipe.splits)
        for target, split in pipe.splits.items():
            tgt = split.target

            def a2xp(**kw) -> float:
                run = pipe.generalize(target, **kw)
                return evaluate_accuracy(run.net, run.bank, run.heads, run.mixer, tgt).accuracy

            if "mixer" in cfg.ablation_grids:
                for m in MixerConfig.all_combinations():
                    rows.append(["mixer", m.label, seed, target, a2xp(mixer=m)])
            if "init" in cfg.ablation_grids:
                for init in INIT_GRID:
                    rows.append(["init", init, seed, target, a2xp(init=init)])
            if "tuning" in cfg.ablation_grids:
                for label, mode, with_prompts in TUNING_GRID:
                    if with_prompts:
                        acc = a2xp(tuning_mode=mode)
                    else:
                        acc = baseline_accuracy(pipe.tuned_baseline(target, mode), tgt)
                    rows.append(["tuning", label, seed, target, acc])
    path = run_dir / "ablation.csv"
    _write_rows(path, ["grid", "setting", "seed", "target", "accuracy"], rows)
    settings = list(dict.fromkeys((r[0], r[1]) for r in rows))
    summary = []
    for grid, setting in settings:
        means = [float(np.mean([r[4] for r in rows if (r[0], r[1], r[3]) == (grid, setting, t)])) for t in targets]
        summary.append([grid, setting] + means + [float(np.mean(means))])
    spath = run_dir / "ablation_summary.csv"
    _write_rows(spath, ["grid", "setting"] + targets + ["Avg."], summary)
    return [path, spath]


# --------------------------------------------------------------------------
# analyze
# --------------------------------------------------------------------------

def cmd_analyze(cfg: ExperimentConfig, run_dir: Path, jobs: int = 1) -> list[Path]:
    outputs = []
    mem = None
    for seed in cfg.seeds:
        pipe = _pipeline(cfg, run_dir, seed, jobs)
        out = run_dir / "analysis" / f"seed_{seed}"
        out.mkdir(parents=True, exist_ok=True)
        records = []
        feature_rows = []
        names = [d.name for d in pipe.domains]
        for target in pipe.splits:
            run = _load_run(pipe, run_dir, target)
            for d in pipe.domains:
                records += evaluate_accuracy(run.net, run.bank, run.heads, run.mixer, d,
                                             target_domain=target).records
            feats = export_features(run.net, pipe.splits[target].target, artifacts=(run.bank, run.heads, run.mixer))
            for i in range(len(feats.labels)):
                c = feats.correct[i]
                feature_rows.append([target, feats.sample_ids[i], feats.domains[i], int(feats.labels[i]),
                                     "" if c is None else int(c)] + [float(v) for v in feats.features[i]])
            if mem is None:
                c, h, w = pipe.image_shape
                s_e = count_parameters(run.heads)
                mem = memory_report(count_parameters(run.net), prompt_size(h, w, cfg.border_width, c), s_e,
                                    len(run.bank), len(run.bank))
        write_attention_csv(records, out / "attention_records.csv")
        report = attention_report(records, domains=names, targets=names)
        report.write_summary_csv(out / "attention_summary.csv")
        report.write_pvalue_csv(out / "attention_pvalues.csv")
        dim = len(feature_rows[0]) - 5 if feature_rows else 0
        _write_rows(out / "features.csv", ["target", "sample_id", "domain", "label", "correct"]
                    + [f"f{i}" for i in range(dim)], feature_rows)
        outputs += [out / n for n in ("attention_records.csv", "attention_summary.csv",
                                      "attention_pvalues.csv", "features.csv")]
    path = run_dir / "memory_report.csv"
    mem.write_csv(path)
    return outputs + [path]


COMMANDS = {
    "adapt": cmd_adapt,
    "generalize": cmd_generalize,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="a2xp", description="Expert prompts mixed by attention for domain generalization.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).strip().splitlines()[0] if fn.__doc__ else name)
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        p.add_argument("--jobs", type=int, default=1, help="parallel expert adaptations (default 1)")
        p.add_argument("--output", default=None, help="run directory (overrides output_dir in the config)")
        p.add_argument("-q", "--quiet", action="store_true", help="only print errors")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    try:
        if args.jobs < 1:
            raise ConfigurationError("--jobs must be >= 1")
        cfg = load_config(args.config)
        if args.output:
            cfg.output_dir = args.output
        run_dir = Path(cfg.output_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(run_dir / "config.json")
        outputs = COMMANDS[args.command](cfg, run_dir, args.jobs)
        _record_outputs(run_dir, args.command, outputs)
    except (ConfigurationError, DatasetError, InconsistentClasses, CacheInvalid) as exc:
        print(f"a2xp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (NumericalFailure, DegenerateExpert) as exc:
        print(f"a2xp {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
