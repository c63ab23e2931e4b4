"""Command-line front end: train, eval, preprocess, curate, export, gradcheck.

Every subcommand accepts ``--config file.cfg`` and any number of
``--key value`` overrides (``section.key`` or a unique bare key).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as C
from . import curation as CU
from . import losses as L
from .config import ConfigError, RunConfig, config_from_dict, read_config
from .data import eval_sets, generate
from .evaluation import evaluate, referring_probe
from .model import init_params
from .naflex import preprocess as naflex_preprocess
from .nn import Params
from .tensor import NonFiniteError, ShapeError
from .trainer import InputMode, TrainState, read_metrics, run_stages

log = logging.getLogger("sigrecipe")

REPORT_BEGIN = "=== sigrecipe report ==="
REPORT_END = "=== end report ==="


class CliError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def parse_overrides(extra: list[str]) -> dict[str, str]:
    """['--a', '1', '--b.c=2'] -> {'a': '1', 'b.c': '2'}."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override --{key} needs a value")
            val = extra[i + 1]
            i += 2
        out[key] = val
    return out


def format_report(title: str, values: dict) -> str:
    lines = [REPORT_BEGIN, f"command: {title}"]
    for k, v in values.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        elif isinstance(v, (dict, list, tuple)):
            v = json.dumps(v, sort_keys=True)
        lines.append(f"{k}: {v}")
    lines.append(REPORT_END)
    return "\n".join(lines)


def parse_report(text: str) -> dict[str, str]:
    """Key/value pairs between the report delimiters."""
    body = text.split(REPORT_BEGIN, 1)[1].split(REPORT_END, 1)[0]
    out = {}
    for line in body.strip().splitlines():
        k, _, v = line.partition(": ")
        out[k] = v
    return out


def _arrays(params: Params) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def mode_for(name: str, rc: RunConfig) -> InputMode:
    if name == "naflex":
        return InputMode(seq_len=rc.eval.naflex_seq_len)
    if name.startswith("fixedres_"):
        side, patch = name[len("fixedres_"):].split("_p")
        return InputMode(side=int(side), patch_size=int(patch))
    return InputMode()


def save_state(path, params: Params, rc: RunConfig, name: str, step: int, stage: str) -> Path:
    mode = mode_for(name, rc)
    C.save_checkpoint(path, C.Checkpoint(_arrays(params), step, stage, rc.to_dict(),
                                         extra={"variant": name, "input_mode": mode.kwargs()}))
    return Path(path)


def load_model(path) -> tuple[Params, RunConfig, InputMode, C.Checkpoint]:
    path = Path(path)
    if not path.exists():
        raise CliError(f"missing checkpoint {path}")
    ckpt = C.load_checkpoint(path)
    rc = config_from_dict(ckpt.config)
    mcfg = rc.model_config()
    params = init_params(mcfg, np.random.default_rng(0))
    required = {k for k in params if not C.is_auxiliary(k)}
    C.load_into(params, ckpt, required)
    mode = InputMode(**ckpt.extra.get("input_mode", {}))
    return params, rc, mode, ckpt


def _eval_sets(rc: RunConfig):
    return eval_sets(rc.eval.seed, rc.eval.n_retrieval, rc.eval.n_zero_shot)


# --------------------------------------------------------------- subcommands

def run_train(rc: RunConfig, out_dir=None) -> dict:
    """Full staged run: checkpoints, metrics, evals, optional ACID comparison and figures."""
    out = Path(out_dir or rc.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    mcfg = rc.model_config()
    plan = rc.train
    weights = L.LossWeights(size=plan.model_size)
    states = run_stages(plan, rc.data, mcfg, rc.branches, weights, out / "metrics.jsonl",
                        log_every=rc.run.log_every, seed=rc.run.seed)
    train_seconds = time.time() - t0
    sets = _eval_sets(rc)
    evals, ckpts = {}, {}
    for name, st in states.items():
        stage = "post80" if name == "base" else ("naflex_adapt" if name == "naflex" else "fixedres_adapt")
        ckpts[name] = str(save_state(out / f"ckpt_{name}.sgr", st.params, rc, name, st.step, stage))
        evals[name] = evaluate(st.params, mcfg, sets, **mode_for(name, rc).kwargs())
        log.info("eval %s %s", name, evals[name])

    acid = None
    if rc.acid.enabled and plan.model_size == "B":
        acid = run_acid(states["base"], rc, sets, out)
    report = {"out_dir": str(out), "train_seconds": train_seconds, "total_seconds": time.time() - t0,
              "checkpoints": ckpts, "eval": evals}
    if acid is not None:
        report["acid"] = acid
    (out / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    if rc.run.plots:
        report["figures"] = [str(p) for p in _render(out, evals)]
    return report


def _render(out: Path, evals: dict) -> list[Path]:
    from .plotting import render_report
    records = read_metrics(out / "metrics.jsonl") if (out / "metrics.jsonl").exists() else []
    return render_report(records, out, evals)


def run_acid(base: TrainState, rc: RunConfig, sets, out: Path) -> dict:
    """Teacher = base fine-tuned on curated data; learner = base; curated vs control arms."""
    mcfg = rc.model_config()
    a = rc.acid
    records: list[dict] = []
    teacher = CU.finetune_teacher_on_curated(base.params, CU.curated_stream(rc.data.seed, start=5 * 10 ** 6),
                                             a.teacher_steps, mcfg, a.teacher_lr, a.batch_size,
                                             seed=rc.run.seed, records=records)
    C.save_checkpoint(out / "ckpt_acid_teacher.sgr",
                      C.Checkpoint(_arrays(teacher), a.teacher_steps, "acid_teacher", rc.to_dict(),
                                   extra={"variant": "acid_teacher", "input_mode": InputMode().kwargs()}))
    res = CU.run_acid_experiment(base.params, teacher, mcfg, a.curation(), sets, a.steps, a.seeds, a.lr,
                                 log_dir=out)
    res["teacher_sig_first"] = records[0]["sig"] if records else None
    res["teacher_sig_last"] = records[-1]["sig"] if records else None
    return res


def cmd_train(rc: RunConfig, args) -> dict:
    report = run_train(rc, args.out_dir)
    flat = {"out_dir": report["out_dir"], "train_seconds": report["train_seconds"],
            "total_seconds": report["total_seconds"]}
    for name, ev in report["eval"].items():
        for k, v in ev.items():
            flat[f"{name}.{k}"] = v
    if "acid" in report:
        flat["acid.acid_median"] = report["acid"]["acid_median"]
        flat["acid.control_median"] = report["acid"]["control_median"]
    for name, path in report["checkpoints"].items():
        flat[f"checkpoint.{name}"] = path
    for p in report.get("figures", []):
        flat[f"figure.{Path(p).stem}"] = p
    return flat


def cmd_eval(rc: RunConfig, args) -> dict:
    params, ck_rc, mode, ckpt = load_model(args.checkpoint)
    mcfg = ck_rc.model_config()
    # eval settings come from the command line config, the model from the checkpoint
    sets = _eval_sets(rc)
    res = evaluate(params, mcfg, sets, **mode.kwargs())
    if args.referring:
        res.update(referring_probe(params, mcfg, sets, steps=args.referring_steps, seed=rc.eval.seed))
    res = {"checkpoint": str(args.checkpoint), "variant": ckpt.extra.get("variant", ""), **res}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(res, indent=2, sort_keys=True))
    if args.plots:
        from .plotting import plot_eval
        path = Path(args.out or args.checkpoint).with_suffix(".png")
        res["figure"] = str(plot_eval({res["variant"] or "model": res}, path))
    return res


def cmd_export(rc: RunConfig, args) -> dict:
    if not args.eval_only:
        raise CliError("export: only --eval-only exports are supported")
    src = Path(args.checkpoint)
    if not src.exists():
        raise CliError(f"missing checkpoint {src}")
    ckpt = C.export_for_eval(C.load_checkpoint(src))
    dst = Path(args.out or src.with_name(src.stem + "_eval.sgr"))
    C.save_checkpoint(dst, ckpt)
    return {"source": str(src), "exported": str(dst), "arrays": len(ckpt.arrays)}


def cmd_preprocess(rc: RunConfig, args) -> dict:
    """Render examples and store their NaFlex patch sequences in the checkpoint container."""
    p = args.patch_size or rc.model.patch_size
    exs = list(generate(rc.data.seed, args.n, rc.data.mix, rc.data.noise, start=args.start,
                        curated_fraction=rc.data.curated_fraction))
    seqs = [naflex_preprocess(e.image, p, args.seq_len) for e in exs]
    arrays = {"patches": np.stack([s.patches for s in seqs]),
              "coords": np.stack([s.coords for s in seqs]).astype(np.float32),
              "mask": np.stack([s.mask for s in seqs]).astype(np.float32)}
    extra = {"ids": [e.example_id for e in exs], "captions": [e.caption for e in exs],
             "grids": [list(s.grid) for s in seqs], "patch_size": p, "seq_len": args.seq_len}
    out = Path(args.out)
    C.save_checkpoint(out, C.Checkpoint(arrays, 0, "preprocess", rc.to_dict(), extra=extra))
    return {"out": str(out), "examples": args.n, "seq_len": args.seq_len, "patch_size": p}


def cmd_curate(rc: RunConfig, args) -> dict:
    """Curated vs control fine-tune of a learner checkpoint against a teacher checkpoint."""
    learner, ck_rc, _, _ = load_model(args.learner)
    if args.teacher:
        teacher, t_rc, _, _ = load_model(args.teacher)
    else:
        teacher = CU.finetune_teacher_on_curated(learner, CU.curated_stream(rc.data.seed, start=5 * 10 ** 6),
                                                 rc.acid.teacher_steps, ck_rc.model_config(), rc.acid.teacher_lr,
                                                 rc.acid.batch_size, seed=rc.run.seed)
    out = Path(args.out_dir or rc.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = CU.run_acid_experiment(learner, teacher, ck_rc.model_config(), rc.acid.curation(), _eval_sets(rc),
                                 rc.acid.steps, rc.acid.seeds, rc.acid.lr, log_dir=out)
    (out / "acid.json").write_text(json.dumps(res, indent=2, sort_keys=True))
    return {"acid_median": res["acid_median"], "control_median": res["control_median"],
            "per_seed": res["per_seed"], "log_dir": str(out)}


def cmd_gradcheck(rc: RunConfig, args) -> dict:
    from .gradcheck import run_suite
    results = run_suite(args.trials)
    out = {r.name: r.max_rel_err for r in results}
    failed = [r.name for r in results if not r.passed(args.tol)]
    out["failed"] = failed
    if failed:
        print(format_report("gradcheck", out))
        raise CliError(f"gradient check failed (rel. err >= {args.tol}): {', '.join(failed)}")
    return out


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "export": cmd_export, "preprocess": cmd_preprocess,
            "curate": cmd_curate, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sigrecipe", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="INI-style config file")
        return p

    p = add("train", "staged training run with branches, evals and figures")
    p.add_argument("--out-dir", dest="out_dir")
    p = add("eval", "retrieval / zero-shot (and optional referring probe) on a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out")
    p.add_argument("--referring", action="store_true")
    p.add_argument("--referring-steps", dest="referring_steps", type=int, default=200)
    p.add_argument("--plots", action="store_true")
    p = add("export", "write a checkpoint without decoder / distillation arrays")
    p.add_argument("checkpoint")
    p.add_argument("--eval-only", dest="eval_only", action="store_true")
    p.add_argument("--out")
    p = add("preprocess", "emit NaFlex patch sequences in the checkpoint container")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--seq-len", dest="seq_len", type=int, default=64)
    p.add_argument("--patch-size", dest="patch_size", type=int, default=0)
    p = add("curate", "curated vs control fine-tune of a learner checkpoint")
    p.add_argument("--learner", required=True)
    p.add_argument("--teacher")
    p.add_argument("--out-dir", dest="out_dir")
    p = add("gradcheck", "finite-difference check of every op and loss term")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        rc = read_config(args.config, parse_overrides(extra))
        result = COMMANDS[args.command](rc, args)
    except (ConfigError, C.CheckpointError, CliError, NonFiniteError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing file {exc.filename}", file=sys.stderr)
        return 2
    print(format_report(args.command, result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
