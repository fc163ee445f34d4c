"""Command-line entry point.

    cpcasr synth      --config run.cfg --out runs/corpus
    cpcasr pretrain   --config run.cfg --out runs/cpc [--init backbone.ckpt]
    cpcasr probe      --config run.cfg --features cpc --regime frozen --out runs/probe
    cpcasr transcribe --config run.cfg [WAV ...]
    cpcasr eval       --config run.cfg
    cpcasr report     a.csv b.csv --layout table1
    cpcasr gradcheck

Exit codes: 0 success, 1 validation or check failure, 2 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .corpus import decode_wav, load_manifest, split, synth_corpus, write_manifest
from .cpc import finetune_backbone, init_model, pretrain
from .errors import ConfigError, CpcAsrError, IoError
from .evaluation import EvalResult, per, render_report, results_from_csv, results_to_csv
from .probe import decode_manifest, train_probe, transcribe
from .config import RunConfig, read_config_file, resolve

log = logging.getLogger("cpcasr")

EXIT_OK, EXIT_FAIL, EXIT_IO = 0, 1, 2


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(path, exc.strerror or str(exc)) from exc


def _out_dir(cfg: RunConfig) -> Path:
    out = cfg.out_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(out, exc.strerror or str(exc)) from exc
    _write_text(out / "resolved_config.txt", cfg.render())
    return out


def _require(cfg: RunConfig, key: str, why: str) -> str:
    if not cfg[key]:
        raise ConfigError([f"{key} is required {why}"])
    return cfg[key]


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    corpus_dir = Path(cfg["corpus_dir"]) if cfg["corpus_dir"] else out
    manifest = synth_corpus(cfg.synth_spec(), corpus_dir)
    parts = split(manifest, cfg["train_frac"], cfg["dev_frac"], cfg["seed"])
    for name, part in zip(("train", "dev", "test"), parts):
        write_manifest(corpus_dir / f"{name}.tsv", part)
    sizes = ", ".join(f"{n}={len(p)}" for n, p in zip(("train", "dev", "test"), parts))
    print(f"wrote {len(manifest)} utterances to {corpus_dir} ({sizes})")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig) -> int:
    manifest = load_manifest(_require(cfg, "train_manifest", "for pretraining"))
    config = cfg.cpc_config()
    out = _out_dir(cfg)
    if cfg["init"]:
        model, curve = finetune_backbone(ckpt.load_cpc(cfg["init"]), manifest, config)
    else:
        model, curve = pretrain(init_model(config), manifest, config)
    ckpt.save_cpc(out / "backbone.ckpt", model)
    _write_text(out / "cpc_loss.csv", curve.to_csv())
    if curve.epochs:
        print(f"epoch 1 loss {curve.totals[0]:.4f} -> epoch {len(curve.epochs)} loss {curve.totals[-1]:.4f}")
    if curve.n_skipped:
        print(f"skipped {curve.n_skipped} utterance(s) shorter than window_samples", file=sys.stderr)
    return EXIT_OK


def _load_backbone(cfg: RunConfig):
    if cfg.feature_kind == "mfcc":
        return None
    return ckpt.load_cpc(_require(cfg, "backbone", "for cpc features"))


def _eval_row(cfg: RunConfig, score, frozen: bool, n_train: int | None) -> EvalResult:
    cpc = cfg.feature_kind != "mfcc"
    return EvalResult(
        cfg["model_name"] or ("CPC" if cpc else "Linear/MFCCs"),
        cfg["pretrain_desc"] or ("CPC" if cpc else "No"),
        frozen,
        cfg["budget_desc"] or (f"{n_train} utts" if n_train is not None else ""),
        cfg["corpus_name"],
        score.per,
        score.n_ref_phones,
        score.n_edits,
    )


def cmd_probe(cfg: RunConfig) -> int:
    train = load_manifest(_require(cfg, "train_manifest", "for probe training"))
    test = load_manifest(_require(cfg, "test_manifest", "for probe evaluation"))
    if cfg["train_limit"]:
        train = train.subset(cfg["train_limit"])
    backbone = _load_backbone(cfg)
    regime = cfg.regime()
    mfcc_cfg = cfg.mfcc_config()
    out = _out_dir(cfg)
    probe, new_backbone, hist = train_probe(
        backbone,
        cfg.feature_kind,
        train,
        regime,
        mfcc_config=mfcc_cfg,
        width=cfg["stack_width"],
        stride=cfg["stack_stride"],
        sample_rate_hz=cfg["sample_rate_hz"],
    )
    ckpt.save_probe(out / "probe.ckpt", probe, mfcc_cfg)
    if regime.kind.value == "finetune":
        ckpt.save_cpc(out / "backbone_finetuned.ckpt", new_backbone)
    refs, hyps = decode_manifest(new_backbone, probe, test, mfcc_cfg, cfg["sample_rate_hz"])
    row = _eval_row(cfg, per(refs, hyps), regime.kind.value == "frozen", len(train))
    text = results_to_csv([row])
    _write_text(out / "eval.csv", text)
    print(text, end="")
    if hist.n_skipped:
        print(f"skipped {hist.n_skipped} infeasible utterance(s)", file=sys.stderr)
    return EXIT_OK


def _load_probe(cfg: RunConfig):
    probe, mfcc_cfg = ckpt.load_probe(_require(cfg, "probe", "(probe checkpoint)"))
    backbone = None
    if probe.feature_kind.value != "mfcc":
        backbone = ckpt.load_cpc(_require(cfg, "backbone", "for cpc features"))
    return probe, backbone, mfcc_cfg or cfg.mfcc_config()


def cmd_transcribe(cfg: RunConfig, wavs) -> int:
    probe, backbone, mfcc_cfg = _load_probe(cfg)
    if wavs:
        for path in wavs:
            print(f"{path}\t{' '.join(transcribe(backbone, probe, decode_wav(path), mfcc_cfg))}")
        return EXIT_OK
    manifest = load_manifest(_require(cfg, "test_manifest", "when no WAV files are given"))
    _, hyps = decode_manifest(backbone, probe, manifest, mfcc_cfg, cfg["sample_rate_hz"])
    for utt, hyp in zip(manifest.utterances, hyps):
        print(f"{utt.id}\t{' '.join(hyp)}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    probe, backbone, mfcc_cfg = _load_probe(cfg)
    test = load_manifest(_require(cfg, "test_manifest", "for evaluation"))
    refs, hyps = decode_manifest(backbone, probe, test, mfcc_cfg, cfg["sample_rate_hz"])
    text = results_to_csv([_eval_row(cfg, per(refs, hyps), cfg["regime"] == "frozen", None)])
    _write_text(_out_dir(cfg) / "eval.csv", text)
    print(text, end="")
    return EXIT_OK


def cmd_report(paths, layout: str, fmt: str) -> int:
    results = []
    for p in paths:
        try:
            text = Path(p).read_text(encoding="utf-8")
        except OSError as exc:
            raise IoError(p, exc.strerror or str(exc)) from exc
        try:
            results += results_from_csv(text)
        except CpcAsrError as exc:
            raise CpcAsrError(f"{p}: {exc}") from exc
    print(render_report(results, layout, fmt), end="")
    return EXIT_OK


def cmd_gradcheck(seed: int, faults=()) -> int:
    from .autodiff import corrupt_adjoint
    from .gradcheck import run_all

    with corrupt_adjoint(*faults):
        suites = run_all(seed)
    ok = True
    for s in suites:
        status = "PASS" if s.passed else "FAIL"
        print(f"{status} {s.name:<12} max rel err {s.max_rel_err:.3e}")
        for name, r in s.reports.items():
            if not r.passed:
                print(f"     {name}: {r.max_rel_err:.3e} at {r.worst}")
        ok &= s.passed
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------- argument parsing


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="DIR", help="output directory (out_dir)")
    p.add_argument("--init", metavar="CHECKPOINT", help="backbone to continue training from")
    p.add_argument("--regime", choices=("frozen", "finetune"))
    p.add_argument("--features", choices=("mfcc", "cpc"))
    p.add_argument("--layout", choices=("table1", "table2"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpcasr", description="CPC pretraining and CTC phoneme probes")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("synth", "generate a synthetic tone corpus and train/dev/test manifests"),
        ("pretrain", "CPC pretraining (or continued training with --init)"),
        ("probe", "train a linear CTC probe and evaluate it on the test manifest"),
        ("transcribe", "decode WAV files or the test manifest"),
        ("eval", "PER of a trained probe on the test manifest"),
    ]:
        p = sub.add_parser(name, help=help_)
        _common(p)
        if name == "transcribe":
            p.add_argument("wavs", nargs="*", metavar="WAV")
    p = sub.add_parser("report", help="render eval CSVs as a Table 1 / Table 2 grid")
    p.add_argument("csvs", nargs="+", metavar="CSV")
    p.add_argument("--layout", choices=("table1", "table2"), default="table1")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="append", default=[], help=argparse.SUPPRESS)
    return parser


def _resolve(args) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError([f"--set expects KEY=VALUE, got {item!r}"])
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for flag, key in [("seed", "seed"), ("out", "out_dir"), ("init", "init"), ("regime", "regime"),
                      ("features", "features"), ("layout", "layout")]:
        val = getattr(args, flag)
        if val is not None:
            overrides[key] = str(val)
    return resolve(file_values, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.csvs, args.layout, args.format)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed, args.inject_fault)
        cfg = _resolve(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "probe":
            return cmd_probe(cfg)
        if args.command == "transcribe":
            return cmd_transcribe(cfg, args.wavs)
        if args.command == "eval":
            return cmd_eval(cfg)
    except OSError as exc:  # IoError included
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CpcAsrError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
