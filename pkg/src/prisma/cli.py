"""Command-line entry points wiring the modules into reproducible runs.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure,
5 acceptance (gradient-check) failure.
"""
from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from . import datagen as dg
from . import metrics
from .checkpoint import CheckpointError, load_model, save_model
from .config import ConfigError, RunConfig, load_config
from .denoiser import ConditioningPack, Denoiser, DenoiserConfig, gradcheck_config
from .diffusion import TrainSpec, Trainer, karras_schedule, sample, sample_task_masks
from .fields import GrfSpec
from .residuals import PdeSpec, guided_residual

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_ACCEPT = 0, 2, 3, 4, 5


def pde_from_name(name: str) -> PdeSpec:
    return PdeSpec(equation=name)


def denoiser_config(cfg: RunConfig) -> DenoiserConfig:
    return DenoiserConfig(
        levels=cfg.levels,
        channels=cfg.channels,
        modes=cfg.modes,
        embed_dim=cfg.embed_dim,
        dropout=cfg.dropout,
        sra_mode=cfg.sra_mode,
        gate_mode=cfg.gate_mode,
        attention_mode=cfg.attention_mode,
        lift_mode=cfg.lift_mode,
        sigma_min=cfg.sigma_min,
        sigma_max=cfg.sigma_max,
    )


def train_spec(cfg: RunConfig) -> TrainSpec:
    return TrainSpec(
        epochs=cfg.epochs,
        batch_size=cfg.batch,
        lr=cfg.lr,
        warmup_epochs=cfg.warmup_epochs,
        ema_half_life=cfg.ema_half_life,
        sigma_min=cfg.sigma_min,
        sigma_max=cfg.sigma_max,
        rho=cfg.rho,
        rbf_scale=cfg.rbf_scale,
        seed=cfg.seed,
    )


def _write_meta(path: str, cfg: RunConfig) -> None:
    with open(path + ".meta", "w") as fh:
        fh.write(f"# config_hash = {cfg.hash()}\n# seed = {cfg.seed}\n")
        fh.write(cfg.text())


def build_task(task: str, data: np.ndarray, sparsity_q: float, noise_fraction: float,
               noise_sigma: float, seed: int):
    """Observations, masks, target channel, and the default replacement flag."""
    b, _, h, w = data.shape
    rng = dg.derive_rng(seed, 999)
    noisy = task.startswith("noisy_")
    base = task.removeprefix("noisy_")
    ma, mu = sample_task_masks(base, (h, w), rng, q=sparsity_q)
    masks = np.broadcast_to(np.stack([ma, mu]), data.shape).copy()
    x_obs = data * masks
    if noisy:
        channel = 0 if base == "forward" else 1
        corrupted = dg.corrupt_observations(
            data[:, channel : channel + 1], noise_fraction, noise_sigma, seed=seed + 1
        )
        x_obs[:, channel] = corrupted[:, 0]
    target = {"forward": 1, "inverse": 0}.get(base, None)
    replace_default = not noisy and base != "unconditional"
    return x_obs, masks, target, replace_default


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.validate()
    if os.path.exists(args.out) and not args.force:
        print(f"error: {args.out} exists (use --force)", file=sys.stderr)
        return EXIT_DATA
    spec = dg.DatasetSpec(
        pde=pde_from_name(cfg.pde),
        n_train=cfg.n_train,
        n_test=cfg.n_test,
        resolution=cfg.resolution,
        seed=cfg.seed,
    )
    samples = dg.generate_dataset(spec)
    rmax = dg.residual_consistency_max(samples, spec.pde)
    tol = dg.RESIDUAL_TOLERANCE[cfg.pde]
    dg.write_dataset(args.out, samples, pde=cfg.pde, dtype="f64")
    _write_meta(args.out, cfg)
    print(f"wrote {samples.shape[0]} samples ({cfg.n_train} train + {cfg.n_test} test) to {args.out}")
    print(f"residual-consistency max = {rmax:.3e} (tolerance {tol:.1e})")
    if rmax >= tol:
        print("error: generated data violates the residual-consistency bound", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _opt_extras(trainer: Trainer) -> dict:
    extras = {f"ema.{k}": v for k, v in trainer.ema.items()}
    if trainer.opt_state is not None:
        extras.update({f"opt.m.{k}": v for k, v in trainer.opt_state["m"].items()})
        extras.update({f"opt.v.{k}": v for k, v in trainer.opt_state["v"].items()})
        extras["opt.step"] = np.asarray([float(trainer.opt_state["step"])])
    extras["train.epoch"] = np.asarray([float(trainer.epoch)])
    return extras


def _restore_trainer(trainer: Trainer, leftovers: dict) -> None:
    trainer.ema = {k[len("ema."):]: v for k, v in leftovers.items() if k.startswith("ema.")}
    m = {k[len("opt.m."):]: v for k, v in leftovers.items() if k.startswith("opt.m.")}
    v = {k[len("opt.v."):]: v for k, v in leftovers.items() if k.startswith("opt.v.")}
    if m:
        trainer.opt_state = {"step": int(leftovers["opt.step"][0]), "m": m, "v": v}
    trainer.epoch = int(leftovers["train.epoch"][0])


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data, pde_name = dg.read_dataset(args.data)
    if pde_name != "unspecified" and pde_name != cfg.pde:
        print(f"error: dataset pde {pde_name!r} != config pde {cfg.pde!r}", file=sys.stderr)
        return EXIT_DATA
    if data.shape[-1] != cfg.resolution:
        print(f"error: dataset resolution {data.shape[-1]} != config {cfg.resolution}",
              file=sys.stderr)
        return EXIT_DATA
    if data.shape[0] < cfg.n_train + cfg.n_test:
        print(f"error: dataset has {data.shape[0]} samples < n_train + n_test", file=sys.stderr)
        return EXIT_DATA
    train_data = np.ascontiguousarray(data[: cfg.n_train], dtype=float)

    if args.resume:
        model, leftovers = load_model(args.resume)
        trainer = Trainer(model, train_spec(cfg), pde_from_name(cfg.pde))
        _restore_trainer(trainer, leftovers)
    else:
        model = Denoiser(denoiser_config(cfg), seed=cfg.seed)
        trainer = Trainer(model, train_spec(cfg), pde_from_name(cfg.pde))
        trainer.estimate_sigma_data(train_data)

    rows: list[tuple] = []
    print(f"training {model.param_count():,} parameters on {train_data.shape[0]} samples")

    def on_epoch(tr, epoch, loss):
        print(f"epoch {epoch}: loss {loss:.5f}")
        save_model(args.out, tr.model, extra=_opt_extras(tr))
        save_model(_ema_path(args.out), tr.ema_model())

    trainer.fit(train_data, log_rows=rows, on_epoch=on_epoch)
    save_model(args.out, trainer.model, extra=_opt_extras(trainer))
    save_model(_ema_path(args.out), trainer.ema_model())
    _write_meta(args.out, cfg)
    log_csv = metrics.format_csv(
        ["epoch", "loss", "lr", "seconds"],
        [(int(e), float(l), float(lr), float(s)) for e, l, lr, s in rows],
        comments=[f"config_hash = {cfg.hash()}", f"seed = {cfg.seed}"],
    )
    with open(args.out + ".log.csv", "w", newline="") as fh:
        fh.write(log_csv)
    print(f"wrote {args.out} (+ EMA, log)")
    return EXIT_OK


def _ema_path(out: str) -> str:
    root, ext = os.path.splitext(out)
    return f"{root}.ema{ext or '.prck'}"


def cmd_sample(args) -> int:
    model, _ = load_model(args.ckpt)
    conditional = args.task != "unconditional"
    if conditional and not args.obs:
        print("error: conditional tasks need --obs FILE", file=sys.stderr)
        return EXIT_DATA
    if args.obs:
        data, pde_name = dg.read_dataset(args.obs)
        if args.max_samples:
            data = data[: args.max_samples]
        pde = pde_from_name(pde_name if pde_name != "unspecified" else args.pde)
    else:
        n = args.max_samples or 16
        data = np.zeros((n, 2, args.resolution, args.resolution))
        pde = pde_from_name(args.pde)

    x_obs, masks, target, replace_default = build_task(
        args.task, data, args.sparsity_q, args.noise_fraction, args.noise_sigma, args.seed
    )
    replace = {"auto": replace_default, "on": True, "off": False}[args.replace]
    schedule = karras_schedule(args.steps, model.config.sigma_min, model.config.sigma_max)

    t0 = time.time()
    pred, stats = sample(
        model, x_obs, masks, pde, schedule, seed=args.seed,
        grf=GrfSpec(kind="rbf", length_scale=args.rbf_scale),
        replace_observed=replace, keep_residual_snapshots=bool(args.trace_out),
    )
    wall = time.time() - t0
    dg.write_dataset(args.out, pred, pde=pde.equation, dtype="f64")

    rows = []
    for i in range(pred.shape[0]):
        row = [i]
        for name, ch in (("a", 0), ("u", 1)):
            denom = np.linalg.norm(data[i, ch])
            rel = float(np.linalg.norm(pred[i, ch] - data[i, ch]) / denom) if denom > 0 else float("nan")
            row.append(rel)
        rows.append(tuple(row))
    csv_text = metrics.format_csv(
        ["sample", "rel_l2_a", "rel_l2_u"],
        rows,
        comments=[
            f"seed = {args.seed}",
            f"task = {args.task}",
            f"steps = {args.steps}",
            f"denoiser_calls = {stats.denoiser_calls}",
            f"residual_calls = {stats.residual_calls}",
            f"wall_seconds = {wall:.3f}",
            f"per_sample_seconds = {wall / pred.shape[0]:.4f}",
        ],
    )
    with open(args.out + ".metrics.csv", "w", newline="") as fh:
        fh.write(csv_text)
    if args.trace_out:
        trace = np.stack(stats.residual_snapshots)  # (iters, B, 1, H, W)
        dg.write_dataset(args.trace_out, trace[:, :, 0, :, :], pde=pde.equation, dtype="f64")
    print(f"sampled {pred.shape[0]} fields in {wall:.2f}s "
          f"({stats.denoiser_calls} denoiser calls); wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred, pde_pred = dg.read_dataset(args.pred)
    truth, pde_truth = dg.read_dataset(args.truth)
    pde = args.pde or (pde_pred if pde_pred != "unspecified" else pde_truth)
    if pred.shape != truth.shape:
        print(f"error: shape mismatch {pred.shape} vs {truth.shape}", file=sys.stderr)
        return EXIT_DATA
    rows = [
        ("rel_l2_a", metrics.relative_l2(pred[:, 0], truth[:, 0])),
        ("rel_l2_u", metrics.relative_l2(pred[:, 1], truth[:, 1])),
    ]
    if pde == "darcy":
        rows.append(("darcy_error_rate", metrics.darcy_error_rate(pred[:, 0], truth[:, 0])))
    print(metrics.format_csv(["metric", "value"], rows), end="")
    return EXIT_OK


def cmd_residual_stats(args) -> int:
    data, pde_name = dg.read_dataset(args.pred)
    pde = pde_from_name(args.pde or pde_name)
    rows = []
    if data.shape[1] == 2:
        from .residuals import residual

        for i in range(data.shape[0]):
            r = residual(pde, data[i, 0], data[i, 1])
            skew, kurt = metrics.residual_moments(r)
            rows.append((i, skew, kurt))
    else:
        # residual-trace container: each record is one iteration snapshot
        for i in range(data.shape[0]):
            skew, kurt = metrics.residual_moments(data[i])
            rows.append((i, skew, kurt))
    print(metrics.format_csv(["snapshot", "skewness", "excess_kurtosis"], rows), end="")
    return EXIT_OK


def run_gradcheck(seed: int = 0, entries_per_tensor: int | None = None,
                  verbose: bool = True) -> float:
    """Full-model finite-difference check on the 16x16 reference model.

    Returns the max relative deviation over all probed parameter entries.
    """
    cfg = gradcheck_config()
    model = Denoiser(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    b, h = 1, 16
    x0 = rng.standard_normal((b, 2, h, h))
    x_noisy = x0 + 0.7 * rng.standard_normal((b, 2, h, h))
    masks = np.ones((b, 2, h, h))
    residual = guided_residual(x_noisy, x0, masks, PdeSpec())
    pack = ConditioningPack(x_obs=x0, masks=masks, residual=residual)
    sigma = np.full(b, 1.3)

    def loss_value():
        out = model.denoise(x_noisy, sigma, pack)
        return float(np.mean((out.value - x0) ** 2))

    tape = ad.Tape()
    pv = {k: tape.leaf(v) for k, v in model.params.items()}
    out = model.denoise(x_noisy, sigma, pack, params=pv)
    d = ad.sub(out, ad.Var(x0))
    grads = tape.backward(ad.mean_all(ad.mul(d, d)))

    worst = 0.0
    worst_name = ""
    for name, arr in model.params.items():
        g_ad = grads[pv[name].nid]
        if g_ad is None:
            g_ad = np.zeros_like(arr)
        if entries_per_tensor is None:
            idx = range(arr.size)
        else:
            idx = np.random.default_rng(hash(name) % 2**32).choice(
                arr.size, size=min(entries_per_tensor, arr.size), replace=False
            )
        fd = ad.numerical_gradient(loss_value, arr, step=1e-5, indices=idx)
        for i in idx:
            a, b_ = g_ad.reshape(-1)[i], fd.reshape(-1)[i]
            # floor 1e-5: below that, central differences at step 1e-5 on an
            # O(1) loss are pure float64 roundoff (~1e-11 absolute)
            rel = abs(a - b_) / max(abs(a), abs(b_), 1e-5)
            if rel > worst:
                worst, worst_name = rel, f"{name}[{i}]"
    if verbose:
        print(f"max relative gradient deviation = {worst:.3e} at {worst_name}")
    return worst


def cmd_gradcheck(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        seed = cfg.seed
    else:
        seed = args.seed
    t0 = time.time()
    worst = run_gradcheck(seed=seed, entries_per_tensor=args.entries)
    print(f"gradcheck finished in {time.time() - t0:.1f}s")
    if worst >= 1e-4:
        print("gradcheck FAILED (>= 1e-4)", file=sys.stderr)
        return EXIT_ACCEPT
    print("gradcheck passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prisma", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a training/test dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None, help="override the config seed")
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a denoiser")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="run guided sampling from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--obs", default=None, help="PRGD file with observation sources")
    s.add_argument("--out", default="samples.prgd")
    s.add_argument("--pde", default="poisson")
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--sparsity-q", type=float, default=0.03)
    s.add_argument("--noise-fraction", type=float, default=1.0)
    s.add_argument("--noise-sigma", type=float, default=1.0)
    s.add_argument("--rbf-scale", type=float, default=0.05)
    s.add_argument("--replace", choices=("auto", "on", "off"), default="auto")
    s.add_argument("--max-samples", type=int, default=None)
    s.add_argument("--trace-out", default=None, help="write per-iteration residual snapshots")
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="compare predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--pde", default=None)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("residual-stats", help="residual skewness/kurtosis per snapshot")
    r.add_argument("--pred", required=True)
    r.add_argument("--pde", default=None)
    r.set_defaults(fn=cmd_residual_stats)

    c = sub.add_parser("gradcheck", help="full-model finite-difference gradient check")
    c.add_argument("--config", default=None)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--entries", type=int, default=None,
                   help="probe at most this many entries per tensor (default: all)")
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (dg.DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RuntimeError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
