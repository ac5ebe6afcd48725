"""``pdaf`` command line: fixture generation through ablation reports.

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines, then flags (flags win).  Exit codes: 0 success,
1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import priors as pr
from .attention import BlockConfig
from .features import FbankConfig, FeatureError
from .network import PAIRINGS, ModelConfig, PdafModel, TrainConfig, train
from .phonetics import INVENTORY, PHONEME_CLASSES, AlignmentError
from .pipeline import (
    ArtifactError,
    featurize,
    fingerprint,
    load_corpus,
    load_embeddings,
    read_speaker_map,
    save_embeddings,
    split_holdout,
    write_fixture,
)

log = logging.getLogger("pdaf")

DEFAULTS = {
    "seed": 0,
    "estimator": "pup",
    "lambda": 1.0,
    "epochs": 30,
    "batch_size": 100,
    "lr": 0.001,
    "warmup_steps": 2000,
    "halve_every": 4,
    "weight_decay": 1e-7,
    "n_blocks": 2,
    "holdout": 0,
    "n_per_speaker": 10,
    "speakers": 8,
    "utts": 20,
    "duration": 2.0,
    "n_mels": 128,
}

INT_KEYS = {"seed", "epochs", "batch_size", "warmup_steps", "halve_every", "n_blocks", "holdout",
            "n_per_speaker", "speakers", "utts", "n_mels"}  # fmt: skip
FLOAT_KEYS = {"lambda", "lr", "weight_decay", "duration"}


class ValidationError(Exception):
    pass


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        if not Path(args.config).exists():
            raise ValidationError(f"config file {args.config} not found")
        cfg.update(read_config(args.config))
    for k, v in vars(args).items():
        if v is not None and k not in ("func", "config"):
            cfg[k] = v
    for k in INT_KEYS & cfg.keys():
        cfg[k] = int(cfg[k])
    for k in FLOAT_KEYS & cfg.keys():
        cfg[k] = float(cfg[k])
    if cfg.get("estimator") not in PAIRINGS:
        raise ValidationError(f"unknown estimator {cfg.get('estimator')!r}; choose from {', '.join(PAIRINGS)}")
    if cfg["estimator"] == "baseline":
        cfg["lambda"] = 0.0
    return cfg


def _out(cfg) -> Path:
    if not cfg.get("out"):
        raise ValidationError("--out is required")
    p = Path(cfg["out"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _need(path, producer: str) -> Path:
    if not path:
        raise ValidationError(f"missing input (produced by `pdaf {producer}`)")
    p = Path(path)
    if not p.exists():
        raise ArtifactError(f"{p} not found (run `pdaf {producer}` first)")
    return p


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_make_fixture(cfg) -> int:
    out = _out(cfg)
    m = write_fixture(out, cfg["speakers"], cfg["utts"], cfg["seed"], cfg["duration"])
    print(f"wrote {len(m['utterances'])} utterances to {out} (fingerprint {m['fingerprint']})")
    return 0


def cmd_featurize(cfg) -> int:
    out = _out(cfg)
    audio = _need(cfg.get("audio_dir"), "make-fixture")
    align = _need(cfg.get("alignments"), "make-fixture")
    spk = read_speaker_map(cfg["speaker_map"]) if cfg.get("speaker_map") else None
    res = featurize(audio, align, out, FbankConfig(n_mels=cfg["n_mels"]), spk)
    print(f"featurize: {len(res.written)} written, {len(res.unchanged)} unchanged, {len(res.failed)} failed")
    for utt, why in sorted(res.failed.items()):
        print(f"  FAILED {utt}: {why}")
    return 1 if res.failed else 0


def cmd_priors(cfg) -> int:
    feats = _need(cfg.get("features"), "featurize")
    utts, manifest = load_corpus(feats, cfg.get("alignments"))
    est = cfg["estimator"].upper()
    if est in ("POP", "PFP"):
        counts = pr.CorpusCounts.from_corpus((u.segments, u.labels) for u in utts.values())
        table = pr.pop(counts) if est == "POP" else pr.pfp(counts)
    elif est in ("PUP", "FUP"):
        uid = cfg.get("utt")
        if not uid or uid not in utts:
            raise ValidationError(f"--utt must name an utterance for the {est} estimator")
        u = utts[uid]
        table = pr.pup(u.segments) if est == "PUP" else pr.fup(u.labels)
    elif est == "UNIFORM":
        table = pr.uniform()
    else:
        raise ValidationError(f"estimator {cfg['estimator']!r} has no prior table")
    obj = table.to_json()
    obj["fingerprint"] = fingerprint({"features": manifest["fingerprint"], "estimator": est, "utt": cfg.get("utt")})
    obj["seed"] = cfg["seed"]
    text = json.dumps(obj, indent=1) + "\n"
    if cfg.get("out"):
        out = Path(cfg["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _run_meta(cfg, **extra) -> dict:
    keys = ("seed", "estimator", "lambda", "epochs", "batch_size", "lr", "warmup_steps", "halve_every",
            "weight_decay", "n_blocks", "holdout")  # fmt: skip
    meta = {k: cfg[k] for k in keys if k in cfg}
    meta.update(extra)
    meta["config_fingerprint"] = fingerprint(meta)
    return meta


def cmd_train(cfg) -> int:
    out = _out(cfg)
    feats = _need(cfg.get("features"), "featurize")
    utts, manifest = load_corpus(feats, cfg.get("alignments"))
    train_ids, test_ids = split_holdout(utts, cfg["holdout"]) if cfg["holdout"] else (sorted(utts), [])
    data = [utts[i] for i in train_ids]
    speakers = sorted({u.speaker for u in data})
    mcfg = ModelConfig(
        n_speakers=len(speakers),
        n_mels=manifest["fbank"]["n_mels"],
        block=BlockConfig(d_model=manifest["fbank"]["n_mels"], n_blocks=cfg["n_blocks"]),
        estimator=cfg["estimator"],
        lam=cfg["lambda"],
        seed=cfg["seed"],
    )
    tcfg = TrainConfig(
        lr=cfg["lr"],
        halve_every=cfg["halve_every"],
        warmup_steps=cfg["warmup_steps"],
        weight_decay=cfg["weight_decay"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
    )
    model = PdafModel(mcfg, speakers)
    model.feature_fingerprint = manifest["fingerprint"]
    meta = _run_meta(cfg, features=manifest["fingerprint"])
    (out / "train.lst").write_text("".join(i + "\n" for i in train_ids))
    (out / "heldout.lst").write_text("".join(i + "\n" for i in test_ids))
    history = train(model, data, tcfg, checkpoint_dir=out / "checkpoints", metrics_path=out / "metrics.jsonl")
    model.save(out / "model.ckpt", extra=meta)
    _write_json(out / "run.json", {**meta, "model_fingerprint": model.fingerprint(),
                                   "final": history[-1].__dict__ if history else None})  # fmt: skip
    from .plotting import plot_training

    plot_training([h.__dict__ for h in history], out / "training.png")
    if history:
        h = history[-1]
        print(f"trained {h.epoch} epochs: loss {h.loss:.4f}, train accuracy {h.accuracy:.3f}")
    return 0


def _load_model(cfg, manifest) -> PdafModel:
    ck = _need(cfg.get("checkpoint"), "train")
    model = PdafModel.load(ck)
    model.check_inventory(INVENTORY)
    if model.feature_fingerprint and model.feature_fingerprint != manifest["fingerprint"]:
        raise ValidationError(
            f"features fingerprint {manifest['fingerprint']} differs from the checkpoint's "
            f"{model.feature_fingerprint}; re-run `pdaf featurize` with the training configuration"
        )
    return model


def _select(utts, cfg) -> list[str]:
    if cfg.get("utt_list"):
        ids = [line.strip() for line in Path(_need(cfg["utt_list"], "train")).read_text().splitlines() if line.strip()]
        missing = [i for i in ids if i not in utts]
        if missing:
            raise ValidationError(f"{len(missing)} listed utterances have no features, e.g. {missing[0]}")
        return ids
    return sorted(utts)


def cmd_embed(cfg) -> int:
    out = _out(cfg)
    feats = _need(cfg.get("features"), "featurize")
    utts, manifest = load_corpus(feats, cfg.get("alignments"))
    model = _load_model(cfg, manifest)
    ids = _select(utts, cfg)
    emb, skipped = ev.embed_all(model, {i: utts[i] for i in ids}, cfg.get("ablate"))
    meta = {
        "model_fingerprint": model.fingerprint(),
        "features": manifest["fingerprint"],
        "estimator": model.cfg.estimator,
        "lambda": model.cfg.lam,
        "seed": cfg["seed"],
        "ablate": cfg.get("ablate"),
        "speakers": {i: utts[i].speaker for i in emb},
    }
    save_embeddings(out / "embeddings.npz", emb, meta)
    print(f"embedded {len(emb)} utterances ({len(skipped)} skipped) -> {out / 'embeddings.npz'}")
    return 0


def _by_speaker(emb, meta) -> dict[str, list[str]]:
    by: dict[str, list[str]] = {}
    for uid in sorted(emb):
        by.setdefault(meta["speakers"][uid], []).append(uid)
    return by


def cmd_trials(cfg) -> int:
    out = _out(cfg)
    emb, meta = load_embeddings(_need(cfg.get("embeddings"), "embed"))
    trials = ev.make_trials(_by_speaker(emb, meta), cfg["n_per_speaker"], cfg["seed"])
    ev.write_trials(out / "trials.txt", trials)
    print(f"wrote {len(trials)} trials -> {out / 'trials.txt'}")
    return 0


def cmd_score(cfg) -> int:
    out = _out(cfg)
    emb, meta = load_embeddings(_need(cfg.get("embeddings"), "embed"))
    if cfg.get("trials"):
        trials = ev.read_trials(_need(cfg["trials"], "trials"))
    else:
        trials = ev.make_trials(_by_speaker(emb, meta), cfg["n_per_speaker"], cfg["seed"])
        ev.write_trials(out / "trials.txt", trials)
    missing = sorted({u for t in trials for u in (t.utt_a, t.utt_b)} - emb.keys())
    if missing:
        raise ValidationError(f"{len(missing)} trial utterances have no embedding, e.g. {missing[0]}")
    scored = ev.score_trials(trials, emb)
    ev.write_scores(out / "scores.csv", scored)
    rep = ev.eer_from_scored(scored)
    pts = ev.det_points([s for t, s in scored if t.target], [s for t, s in scored if not t.target])
    np.savetxt(out / "det.csv", pts, delimiter=",", header="threshold,far,frr", comments="")
    report = {**rep.__dict__, "eer_pct": rep.eer_pct, "model_fingerprint": meta["model_fingerprint"],
              "estimator": meta["estimator"], "lambda": meta["lambda"], "seed": cfg["seed"]}  # fmt: skip
    _write_json(out / "eer.json", report)
    from .plotting import plot_det

    plot_det(pts, rep.eer, out / "det.png", title=f"{meta['estimator']} (λ={meta['lambda']:g})")
    print(f"EER {rep.eer_pct:.3f}% over {rep.n_target} target / {rep.n_nontarget} non-target trials")
    return 0


def cmd_ablate(cfg) -> int:
    out = _out(cfg)
    feats = _need(cfg.get("features"), "featurize")
    utts, manifest = load_corpus(feats, cfg.get("alignments"))
    checkpoints = cfg.get("checkpoint") or []
    if isinstance(checkpoints, str):
        checkpoints = [checkpoints]
    if not checkpoints:
        raise ValidationError("at least one --checkpoint is required (produced by `pdaf train`)")
    models = [_load_model({**cfg, "checkpoint": c}, manifest) for c in checkpoints]
    trials = ev.read_trials(_need(cfg.get("trials"), "trials"))
    conds = list(cfg.get("cls") or []) + list(cfg.get("phoneme") or [])
    if cfg.get("all_classes"):
        conds += list(PHONEME_CLASSES)
    if cfg.get("all_phonemes"):
        conds += [s for s in INVENTORY.symbols if s != "SIL"]
    if not conds:
        raise ValidationError("give at least one --class or --phoneme condition")
    ids = sorted({u for t in trials for u in (t.utt_a, t.utt_b)})
    missing = [i for i in ids if i not in utts]
    if missing:
        raise ValidationError(f"{len(missing)} trial utterances have no features, e.g. {missing[0]}")
    rows = ev.ablation_study(models, {i: utts[i] for i in ids}, trials, conds)
    meta = {
        "model_fingerprints": [m.fingerprint() for m in models],
        "features": manifest["fingerprint"],
        "estimator": models[0].cfg.estimator,
        "lambda": models[0].cfg.lam,
        "seed": cfg["seed"],
        "n_trials": len(trials),
    }
    ev.write_ablation(rows, out / "ablation.csv", out / "ablation.json", meta)
    from .plotting import plot_ablation

    plot_ablation(rows, out / "ablation.png")
    for r in rows:
        print(f"{r.condition:>12s}  EER {r.eer:6.2f}%  Δ {r.delta:+6.2f}  ({r.n_trials} trials)")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (file for `priors`)")
    common.add_argument("-v", "--verbose", action="store_true", default=None)

    p = argparse.ArgumentParser(prog="pdaf", description="Phoneme-debiased attention speaker verification toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-fixture", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--speakers", type=int)
    s.add_argument("--utts", type=int, help="utterances per speaker")
    s.add_argument("--duration", type=float, help="seconds per utterance")
    s.set_defaults(func=cmd_make_fixture)

    s = sub.add_parser("featurize", parents=[common], help="WAV + alignments -> log-mel cache")
    s.add_argument("--audio-dir")
    s.add_argument("--alignments")
    s.add_argument("--speaker-map", help="file of 'utt speaker' lines")
    s.add_argument("--n-mels", type=int)
    s.set_defaults(func=cmd_featurize)

    est = dict(choices=sorted(PAIRINGS))
    s = sub.add_parser("priors", parents=[common], help="emit a phoneme prior table as JSON")
    s.add_argument("--features")
    s.add_argument("--alignments")
    s.add_argument("--estimator", choices=["pop", "pfp", "pup", "fup", "uniform"])
    s.add_argument("--utt", help="utterance id for pup/fup")
    s.set_defaults(func=cmd_priors)

    s = sub.add_parser("train", parents=[common], help="train a speaker model")
    s.add_argument("--features")
    s.add_argument("--alignments")
    s.add_argument("--estimator", **est)
    s.add_argument("--lambda", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--warmup-steps", type=int)
    s.add_argument("--halve-every", type=int)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--n-blocks", type=int)
    s.add_argument("--holdout", type=int, help="utterances per speaker held out of training")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("embed", parents=[common], help="extract speaker embeddings")
    s.add_argument("--features")
    s.add_argument("--alignments")
    s.add_argument("--checkpoint")
    s.add_argument("--utt-list", help="file of utterance ids (e.g. heldout.lst)")
    s.add_argument("--ablate", help="phoneme symbol or class to mask")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("trials", parents=[common], help="generate a balanced trial list")
    s.add_argument("--embeddings")
    s.add_argument("--n-per-speaker", type=int)
    s.set_defaults(func=cmd_trials)

    s = sub.add_parser("score", parents=[common], help="cosine-score trials and compute EER")
    s.add_argument("--embeddings")
    s.add_argument("--trials")
    s.add_argument("--n-per-speaker", type=int)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("ablate", parents=[common], help="phoneme / class masking study")
    s.add_argument("--features")
    s.add_argument("--alignments")
    s.add_argument("--checkpoint", action="append")
    s.add_argument("--trials")
    s.add_argument("--class", dest="cls", action="append", choices=list(PHONEME_CLASSES))
    s.add_argument("--phoneme", action="append")
    s.add_argument("--all-classes", action="store_true", default=None)
    s.add_argument("--all-phonemes", action="store_true", default=None)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return args.func(cfg)
    except (ValidationError, ArtifactError, AlignmentError, ev.TrialError, FeatureError, ValueError) as exc:
        print(f"pdaf {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"pdaf {args.command}: runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
