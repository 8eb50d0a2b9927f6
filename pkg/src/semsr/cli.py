"""Command-line entry point: ``semsr <subcommand> [--config PATH] [--seed N] [--out DIR] ...``.

Exit codes: 0 success, 1 validation error (bad arguments, malformed config, missing
or invalid inputs, failed gradient check), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from . import pipeline as pl
from .config import RunConfig

log = logging.getLogger("semsr")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--out", type=Path, help="workspace directory (overrides paths.workspace)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semsr", description="Synthetic SEM super-resolution pipeline")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", help="render HR/LR specimen pairs")
    _common(p)
    p.add_argument("--pairs", type=int)

    p = sub.add_parser("register", help="co-register simulated pairs")
    _common(p)

    p = sub.add_parser("dataset", help="cut patches and split train/validation by pair")
    _common(p)
    p.add_argument("--patch", type=int)

    p = sub.add_parser("train", help="adversarial training")
    _common(p)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("infer", help="super-resolve held-out pairs or a single LR image")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--input", type=Path, help="raw LR image (PNG/PGM with pitch sidecar)")
    p.add_argument("--output", type=Path)
    p.add_argument("--pitch-nm", type=float, help="pitch of --input when it has no sidecar")
    p.add_argument("--tile", type=int)

    p = sub.add_parser("eval-gaps", help="inter-particle gap statistics")
    _common(p)
    p.add_argument("--n-gaps", type=int)

    p = sub.add_parser("eval-spectrum", help="radially averaged spectra")
    _common(p)
    p.add_argument("--n-bins", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--trials", type=int, default=20)

    p = sub.add_parser("report", help="compose the summary JSON")
    _common(p)
    return parser


def effective_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    cmd = args.command
    if cmd == "simulate" and args.pairs is not None:
        over["sim"] = {"pairs": args.pairs}
    if cmd == "dataset" and args.patch is not None:
        over["dataset"] = {"patch": args.patch}
    if cmd == "train" and args.iterations is not None:
        over["train"] = {"iterations": args.iterations}
    if cmd == "infer" and args.tile is not None:
        over["eval"] = {"tile": args.tile}
    if cmd == "eval-gaps" and args.n_gaps is not None:
        over["eval"] = {"n_gaps": args.n_gaps}
    if cmd == "eval-spectrum" and args.n_bins is not None:
        over["eval"] = {"n_bins": args.n_bins}
    return cfg.with_overrides(**over) if over else cfg


def _emit(obj) -> None:
    print(json.dumps(pl._jsonable(obj), indent=1, sort_keys=True))


def run(args) -> int:
    cfg = effective_config(args)
    base = args.config.parent if args.config else None
    paths = cfg.resolve(args.out, base if args.out is None else None)
    cmd = args.command
    if cmd == "simulate":
        out = pl.stage_simulate(cfg, paths)
        _emit({"simulated": cfg.sim.pairs, "dir": str(out)})
    elif cmd == "register":
        out = pl.stage_register(cfg, paths)
        man = json.loads((out / "manifest.json").read_text())
        _emit({k: man[k] for k in ("accepted", "mean_rmse_before", "mean_rmse_after")})
    elif cmd == "dataset":
        out = pl.stage_dataset(cfg, paths)
        man = json.loads((out / "manifest.json").read_text())
        _emit({"n_train": man["n_train"], "n_val": man["n_val"]})
    elif cmd == "train":
        st = pl.stage_train(cfg, paths, resume=args.resume)
        _emit({"iterations": st.iteration, "loss_shares": st.loss_shares(),
               "initial_val_l1": st.initial_val_l1, "final_val_l1": st.final_val_l1})
    elif cmd == "infer":
        written = pl.stage_infer(cfg, paths, args.checkpoint, args.input, args.output, args.pitch_nm)
        _emit({"written": [str(p) for p in written]})
    elif cmd == "eval-gaps":
        _emit(pl.stage_eval_gaps(cfg, paths).summary())
    elif cmd == "eval-spectrum":
        _emit(pl.stage_eval_spectrum(cfg, paths).summary())
    elif cmd == "gradcheck":
        from .gradcheck import run_suite

        results = run_suite(trials=args.trials, seed=cfg.seed)
        doc = {"passed": all(r.passed for r in results), "results": [r.to_json() for r in results]}
        out = paths["workspace"]
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps(doc, indent=1) + "\n")
        for r in results:
            log.info("%-20s max rel err %.2e  %s", r.name, r.max_rel_err, "ok" if r.passed else "FAIL")
        _emit({"passed": doc["passed"], "failed": [r.name for r in results if not r.passed]})
        return EXIT_OK if doc["passed"] else EXIT_INVALID
    elif cmd == "report":
        s = pl.stage_report(cfg, paths)
        _emit({k: s[k] for k in ("unresolved_fraction", "mean_abs_diff_vs_truth_nm", "spectral_recovery_score", "loss_shares")})
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"semsr: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return run(args)
    except (ValidationError, json.JSONDecodeError) as exc:
        print(f"semsr: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FileNotFoundError, ValueError) as exc:
        print(f"semsr: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # runtime failure
        log.exception("runtime failure")
        print(f"semsr: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
