"""Command-line surface: synth | train | estimate | denoise | eval.

Each command is a pure function of (config file, input files): reruns
produce byte-identical outputs.  Wall-clock timings never enter reports;
they go to ``run.log`` only.

Config is a single JSON file, schema-versioned, with unknown keys rejected
at any nesting level.  Gaussian noise levels are given as sigma on the
0-255 scale (divided by 255 at parse time); Poisson zeta and Gamma k are
unit-scale already.

Exit codes: 0 success, 2 validation error, 3 estimation failure,
4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .ardae import ArdaeConfig, eval_score, load_checkpoint, save_checkpoint, train_ardae
from .errors import (
    DomainError,
    EstimationFailure,
    TrainingDivergence,
    TweedenoiseError,
    ValidationError,
)
from .estimate import UNKNOWN, estimate_level, estimate_rho, perturb
from .pipeline import DenoiseCfg, blind_estimate, denoise_known, posterior_mean_field
from .scores import analytic_score_gaussian, numeric_marginal_score
from .simulate import (
    GmmPrior,
    SynthSpec,
    gen_clean,
    load_tensor,
    psnr,
    sample_noisy,
    save_tensor,
)
from .tweedie import ModelKind, NoiseModel, denoise_field, EPS_Y

log = logging.getLogger("tweedenoise")

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ESTIMATION = 3
EXIT_DIVERGENCE = 4

_TOP_KEYS = {"schema_version", "seed", "out_dir", "synth", "noise", "score_backend", "ardae", "estimation"}
_SYNTH_KEYS = {"kind", "height", "width", "regions", "count", "prior"}
_PRIOR_KEYS = {"weights", "means", "stds"}
_NOISE_KEYS = {"model", "level"}
_EST_KEYS = {"eps", "mask_eps", "rho_assumed", "pooled"}
_ARDAE_KEYS = {
    "sigma_a_max", "sigma_a_min", "schedule_len", "ema_decay", "epochs",
    "batch_size", "lr", "lr_decay_epoch", "patch_radius", "hidden",
}


def _reject_unknown(d: dict, allowed: set, where: str):
    extra = set(d) - allowed
    if extra:
        raise ValidationError(f"unknown config key(s) {sorted(extra)} in {where}")


def parse_config(path) -> dict:
    """Load, validate and normalize a config file."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError("config root must be an object")
    _reject_unknown(raw, _TOP_KEYS, "top level")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(f"schema_version must be {SCHEMA_VERSION}")
    if "seed" not in raw or not isinstance(raw["seed"], int):
        raise ValidationError("config must carry an explicit integer seed")

    cfg = {"seed": raw["seed"], "out_dir": raw.get("out_dir", "out")}

    synth = raw.get("synth")
    if synth is not None:
        _reject_unknown(synth, _SYNTH_KEYS, "synth")
        prior = synth.get("prior")
        if prior is None:
            raise ValidationError("synth.prior is required")
        _reject_unknown(prior, _PRIOR_KEYS, "synth.prior")
        cfg["prior"] = GmmPrior(tuple(prior["weights"]), tuple(prior["means"]), tuple(prior["stds"]))
        cfg["synth"] = {
            "kind": synth.get("kind", "gmm_iid"),
            "height": int(synth.get("height", 64)),
            "width": int(synth.get("width", 64)),
            "regions": int(synth.get("regions", 1)),
            "count": int(synth.get("count", 1)),
        }
        if cfg["synth"]["count"] < 1:
            raise ValidationError("synth.count must be >= 1")

    noise = raw.get("noise")
    if noise is not None:
        _reject_unknown(noise, _NOISE_KEYS, "noise")
        try:
            kind = ModelKind(noise["model"])
        except ValueError as exc:
            raise ValidationError(f"unknown noise model {noise.get('model')!r}") from exc
        level = float(noise["level"])
        if kind is ModelKind.GAUSSIAN:
            level = level / 255.0  # sigma given on the 8-bit scale
        cfg["noise_kind"] = kind
        cfg["noise_level"] = level  # natural units: sigma | zeta | k

    est = raw.get("estimation", {})
    _reject_unknown(est, _EST_KEYS, "estimation")
    cfg["denoise_cfg"] = DenoiseCfg(
        eps=float(est.get("eps", 1e-5)),
        mask_eps=float(est.get("mask_eps", 1e-5)),
        rho_assumed=float(est.get("rho_assumed", 2.2)),
        seed=raw["seed"],
    )
    cfg["pooled"] = bool(est.get("pooled", False))

    ar = raw.get("ardae", {})
    _reject_unknown(ar, _ARDAE_KEYS, "ardae")
    if "hidden" in ar:
        ar = dict(ar, hidden=tuple(ar["hidden"]))
    cfg["ardae"] = ArdaeConfig(seed=raw["seed"], **ar).validate()

    cfg["score_backend"] = raw.get("score_backend", "oracle-gaussian")
    sb = cfg["score_backend"]
    if sb.startswith("ardae:"):
        ckpt = Path(sb.split(":", 1)[1])
        if not ckpt.exists():
            raise ValidationError(f"checkpoint {ckpt} does not exist")
    elif sb not in ("oracle-gaussian", "oracle-quadrature"):
        raise ValidationError(f"unknown score backend {sb!r}")
    return cfg


def _image_seed(master: int, index: int, purpose: int) -> int:
    return int(np.random.SeedSequence([master, index, purpose]).generate_state(1)[0])


def _true_model(cfg) -> NoiseModel:
    kind, level = cfg["noise_kind"], cfg["noise_level"]
    if kind is ModelKind.GAUSSIAN:
        return NoiseModel(kind, level * level)  # store sigma^2 internally
    return NoiseModel(kind, level)


def make_backend(cfg):
    """Score-field closure y -> ScoreField for the configured backend."""
    sb = cfg["score_backend"]
    if sb == "oracle-gaussian":
        prior, sigma = cfg["prior"], cfg["noise_level"]
        return lambda y: analytic_score_gaussian(y, prior, sigma)
    if sb == "oracle-quadrature":
        prior, model = cfg["prior"], _true_model(cfg)
        return lambda y: numeric_marginal_score(y, prior, model)
    params, _ = load_checkpoint(sb.split(":", 1)[1])
    return lambda y: eval_score(params, y)


def _natural_level(kind: str, value: float) -> float:
    # internal levels are sigma^2 | zeta | k; reports use sigma | zeta | k
    if kind == ModelKind.GAUSSIAN.value:
        return float(np.sqrt(value))
    return float(value)


def _load_manifest(out_dir: Path):
    mpath = out_dir / "manifest.json"
    if not mpath.exists():
        raise ValidationError(f"manifest {mpath} does not exist (run synth first)")
    manifest = json.loads(mpath.read_text())
    if not manifest.get("images"):
        raise ValidationError("manifest lists no images")
    return manifest


def cmd_synth(cfg) -> int:
    if "synth" not in cfg or "noise_kind" not in cfg:
        raise ValidationError("synth command needs synth and noise config sections")
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    sp, model = cfg["synth"], _true_model(cfg)
    images = []
    for i in range(sp["count"]):
        spec = SynthSpec(
            kind=sp["kind"], height=sp["height"], width=sp["width"],
            prior=cfg["prior"], regions=sp["regions"],
            seed=_image_seed(cfg["seed"], i, 0),
        )
        x = gen_clean(spec)
        noise_seed = _image_seed(cfg["seed"], i, 1)
        y = sample_noisy(x, model, noise_seed)
        clean_name, noisy_name = f"clean_{i:03d}.f32", f"noisy_{i:03d}.f32"
        save_tensor(out / clean_name, x)
        save_tensor(out / noisy_name, y)
        images.append({"index": i, "clean": clean_name, "noisy": noisy_name, "noise_seed": noise_seed})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "model": cfg["noise_kind"].value,
        "level": cfg["noise_level"],
        "images": images,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    log.info("synth: wrote %d image pairs to %s", len(images), out)
    return EXIT_OK


def cmd_train(cfg) -> int:
    out = Path(cfg["out_dir"])
    manifest = _load_manifest(out)
    data = [load_tensor(out / im["noisy"]) for im in manifest["images"]]
    params, history = train_ardae(cfg["ardae"], data)
    save_checkpoint(out / "checkpoint.npz", params, cfg["ardae"])
    running = float("inf")
    with open(out / "loss.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "loss", "running_min", "lr"])
        for epoch, loss, lr in history:
            running = min(running, loss)
            wr.writerow([epoch, repr(loss), repr(running), repr(lr)])
    log.info("train: %d epochs -> %s", len(history), out / "checkpoint.npz")
    return EXIT_OK


def _probe_all(cfg, manifest, out):
    """Perturb + score every image; returns (ys, pairs, s1s, s2s)."""
    backend = make_backend(cfg)
    dn = cfg["denoise_cfg"]
    dn.validate()
    ys, pairs, s1s, s2s = [], [], [], []
    for im in manifest["images"]:
        y = load_tensor(out / im["noisy"])
        pair = perturb(y, dn.eps, _image_seed(cfg["seed"], im["index"], 2))
        ys.append(y)
        pairs.append(pair)
        s1s.append(backend(pair.y1))
        s2s.append(backend(pair.y2))
    return ys, pairs, s1s, s2s


def cmd_estimate(cfg) -> int:
    out = Path(cfg["out_dir"])
    manifest = _load_manifest(out)
    ys, pairs, s1s, s2s = _probe_all(cfg, manifest, out)
    dn = cfg["denoise_cfg"]

    if cfg["pooled"]:
        from .pipeline import _pool

        pair, s1, s2 = _pool(pairs, s1s, s2s)
        groups = [(pair, s1, s2)] * len(pairs)
    else:
        groups = list(zip(pairs, s1s, s2s))

    rows = []
    truth_kind = manifest["model"]
    truth_level = manifest["level"]
    for im, (pair, s1, s2) in zip(manifest["images"], groups):
        me = estimate_rho(pair, s1, s2, mask_eps=dn.mask_eps, rho_assumed=dn.rho_assumed)
        level = None
        if me.classified != UNKNOWN:
            le = estimate_level(me.classified, pair, s1, s2)
            level = _natural_level(me.classified, le.value)
        report = {
            "rho_hat": me.rho_hat,
            "model": me.classified,
            "level": level,
            "mask_fraction": me.mask_fraction,
            "pixel_count": int(pair.y1.size),
            "seed": cfg["seed"],
            "backend": s1.backend,
        }
        (out / f"estimate_{im['index']:03d}.json").write_text(json.dumps(report, sort_keys=True))
        rows.append(
            [im["index"], repr(me.rho_hat), me.classified,
             "" if level is None else repr(level),
             truth_kind, repr(truth_level), int(me.classified == truth_kind)]
        )
    with open(out / "estimates.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image", "rho_hat", "model", "level", "truth_model", "truth_level", "correct"])
        wr.writerows(rows)
    acc = float(np.mean([r[-1] for r in rows]))
    log.info("estimate: accuracy %.3f over %d images", acc, len(rows))
    return EXIT_OK


def _denoise_batch(cfg, save_tensors: bool) -> int:
    out = Path(cfg["out_dir"])
    manifest = _load_manifest(out)
    truth = _true_model(cfg)
    backend = make_backend(cfg)
    dn = cfg["denoise_cfg"]
    dn.validate()
    ys, pairs, s1s, s2s = _probe_all(cfg, manifest, out)

    pooled_est = None
    if cfg["pooled"]:
        from .pipeline import _pool

        pair, s1, s2 = _pool(pairs, s1s, s2s)
        me = estimate_rho(pair, s1, s2, mask_eps=dn.mask_eps, rho_assumed=dn.rho_assumed)
        if me.classified == UNKNOWN:
            raise EstimationFailure(f"pooled rho_hat={me.rho_hat:.3f} classified as unknown")
        le = estimate_level(me.classified, pair, s1, s2)
        pooled_est = (me, le)

    rows = []
    for im, y, pair, s1, s2 in zip(manifest["images"], ys, pairs, s1s, s2s):
        x = load_tensor(out / im["clean"])
        row = {"image": im["index"], "noisy": psnr(x, y)}
        try:
            if pooled_est is None:
                me = estimate_rho(pair, s1, s2, mask_eps=dn.mask_eps, rho_assumed=dn.rho_assumed)
                if me.classified == UNKNOWN:
                    raise EstimationFailure(f"rho_hat={me.rho_hat:.3f} classified as unknown")
                le = estimate_level(me.classified, pair, s1, s2)
            else:
                me, le = pooled_est
            est_model = NoiseModel(ModelKind(me.classified), le.value)
            xb, _ = denoise_field(pair.y1, est_model, s1.values)
            xb = np.clip(xb, EPS_Y, 1.0)
            row["blind"] = psnr(x, xb)
            row["error"] = ""
            if save_tensors:
                save_tensor(out / f"denoised_{im['index']:03d}.f32", xb)
                rep = {
                    "rho_hat": me.rho_hat, "model": me.classified,
                    "level": _natural_level(me.classified, le.value),
                    "mask_fraction": me.mask_fraction, "backend": s1.backend,
                }
                (out / f"denoise_{im['index']:03d}.json").write_text(json.dumps(rep, sort_keys=True))
        except TweedenoiseError as exc:
            log.warning("image %s blind path failed: %s", im["index"], exc)
            row["blind"] = float("nan")
            row["error"] = str(exc)
        xk = denoise_known(y, truth, backend)
        row["known"] = psnr(x, xk)
        xo = posterior_mean_field(y, cfg["prior"], truth)
        row["oracle"] = psnr(x, np.clip(xo, EPS_Y, 1.0))
        rows.append(row)

    with open(out / "psnr.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image", "psnr_noisy", "blind", "known_level", "oracle_posterior", "error"])
        for r in rows:
            wr.writerow([r["image"], repr(r["noisy"]), repr(r["blind"]), repr(r["known"]), repr(r["oracle"]), r["error"]])
        ok = [r for r in rows if not np.isnan(r["blind"])]
        if ok:
            wr.writerow(
                ["mean",
                 repr(float(np.mean([r["noisy"] for r in ok]))),
                 repr(float(np.mean([r["blind"] for r in ok]))),
                 repr(float(np.mean([r["known"] for r in ok]))),
                 repr(float(np.mean([r["oracle"] for r in ok]))),
                 ""]
            )
    log.info("denoise: wrote %s", out / "psnr.csv")
    return EXIT_OK


def cmd_denoise(cfg) -> int:
    return _denoise_batch(cfg, save_tensors=True)


def cmd_eval(cfg) -> int:
    return _denoise_batch(cfg, save_tensors=False)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "estimate": cmd_estimate,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tweedenoise", description=__doc__)
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="path to the JSON config")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--out", default=None, help="override the output directory")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
            cfg["denoise_cfg"] = DenoiseCfg(
                eps=cfg["denoise_cfg"].eps, mask_eps=cfg["denoise_cfg"].mask_eps,
                rho_assumed=cfg["denoise_cfg"].rho_assumed, seed=args.seed,
            )
        if args.out is not None:
            cfg["out_dir"] = args.out
        out = Path(cfg["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        logging.basicConfig(
            level=logging.INFO,
            format="%(asctime)s %(levelname)s %(message)s",
            handlers=[logging.FileHandler(out / "run.log"), logging.StreamHandler(sys.stderr)],
            force=True,
        )
        return COMMANDS[args.command](cfg)
    except (ValidationError, DomainError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except EstimationFailure as exc:
        print(f"estimation failure: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except TrainingDivergence as exc:
        print(f"training divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
