"""Command-line experiment runner.

Subcommands: ``run`` executes a seed ensemble per configured algorithm and
writes results.csv, summary.json, and plot.svg; ``sweep`` repeats a run over
a parameter grid and fits rate scaling; ``verify`` runs the assumption audits
and bound checks; ``reproduce-appendix`` runs the bundled delayed-TD
comparison config.

Exit codes: 0 success, 2 invalid configuration, 3 divergence, 4 verification
failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import math
import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import chain as chainmod
from . import engine, metrics, operators, schedule, verify
from .errors import (
    AllDiverged,
    ConfigInvalid,
    DelaySAError,
    MonotonicityViolation,
    StepSizeTooLarge,
    WindowTooSmall,
)

CSV_HEADER = "t,algo,mean_mse,ci_half,updates_cum"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_VERIFY = 4


@dataclass
class AlgorithmSpec:
    name: str
    rule_kind: str  # non-delayed | constant | time-varying | delay-adaptive
    step_mode: engine.ManualStep | engine.TheoremStep
    epsilon: float | str | None = None  # number or "alpha"
    tau: int | None = None


@dataclass
class ExperimentConfig:
    name: str
    problem: dict
    chain: dict
    delay: dict
    algorithms: list[AlgorithmSpec]
    T: int
    n_seeds: int
    seed_base: int
    record_iterates: bool = False
    sweep: dict | None = None
    verify_opts: dict | None = None


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    return parse_config(doc, name=Path(path).stem)


def parse_config(doc: dict, name: str = "experiment") -> ExperimentConfig:
    try:
        algos = []
        for a in doc["algorithms"]:
            ss = a.get("step_size", {"mode": "manual", "alpha": 0.1})
            if ss["mode"] == "manual":
                mode = engine.ManualStep(float(ss["alpha"]))
            elif ss["mode"] == "theorem":
                mode = engine.TheoremStep(float(ss.get("C", 196.0)))
            else:
                raise ConfigInvalid(f"unknown step-size mode {ss['mode']!r}")
            algos.append(
                AlgorithmSpec(
                    name=a.get("name", a["rule"]),
                    rule_kind=a["rule"],
                    step_mode=mode,
                    epsilon=a.get("epsilon", "alpha"),
                    tau=a.get("tau"),
                )
            )
        cfg = ExperimentConfig(
            name=doc.get("name", name),
            problem=doc["problem"],
            chain=doc["chain"],
            delay=doc.get("delay", {"kind": "none"}),
            algorithms=algos,
            T=int(doc["T"]),
            n_seeds=int(doc.get("n_seeds", 1)),
            seed_base=int(doc.get("seed_base", 0)),
            record_iterates=bool(doc.get("record_iterates", False)),
            sweep=doc.get("sweep"),
            verify_opts=doc.get("verify"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"malformed config: {exc}") from exc
    if cfg.T < 1 or cfg.n_seeds < 1:
        raise ConfigInvalid("T and n_seeds must be positive")
    known = {"non-delayed", "constant", "time-varying", "delay-adaptive"}
    for a in cfg.algorithms:
        if a.rule_kind not in known:
            raise ConfigInvalid(f"unknown rule {a.rule_kind!r}")
    return cfg


def build_problem(cfg: ExperimentConfig):
    try:
        ch = chainmod.chain_from_config(cfg.chain)
        return operators.problem_from_config(cfg.problem, ch)
    except DelaySAError:
        raise
    except (KeyError, ValueError) as exc:
        raise ConfigInvalid(str(exc)) from exc


def _build_rule(spec: AlgorithmSpec, cfg: ExperimentConfig, alpha: float) -> engine.Rule:
    if spec.rule_kind == "non-delayed":
        return engine.NonDelayed()
    if spec.rule_kind == "constant":
        tau = spec.tau
        if tau is None:
            if cfg.delay.get("kind") != "constant":
                raise ConfigInvalid("constant rule needs a tau (per-algorithm or delay config)")
            tau = int(cfg.delay["tau"])
        return engine.ConstantDelay(int(tau))
    sched = schedule.schedule_from_config(cfg.delay)
    if sched is None:
        raise ConfigInvalid(f"rule {spec.rule_kind!r} needs a delay schedule")
    if spec.rule_kind == "time-varying":
        return engine.TimeVarying(sched)
    eps = alpha if spec.epsilon in (None, "alpha") else float(spec.epsilon)
    return engine.DelayAdaptive(sched, eps)


@dataclass
class AlgorithmResult:
    spec: AlgorithmSpec
    step: engine.StepSizeInfo
    traces: list[engine.RunTrace]
    ensemble: metrics.EnsembleResult
    rate: metrics.RateFit | None
    final_window_mse: float
    update_fraction: float


def run_algorithm(op, spec: AlgorithmSpec, cfg: ExperimentConfig,
                  threads: int | None = None) -> AlgorithmResult:
    # two-stage resolve: theorem rules need the rule's delay scale before alpha
    probe_rule = _build_rule(spec, cfg, alpha=1.0)
    step = engine.resolve_step_size(op, probe_rule, spec.step_mode)
    rule = _build_rule(spec, cfg, alpha=step.alpha)
    run_cfg = engine.RunConfig(
        rule=rule,
        alpha=step.alpha,
        T=cfg.T,
        seed=cfg.seed_base,
        record_iterates=cfg.record_iterates,
    )
    traces = engine.run_ensemble(op, run_cfg, cfg.n_seeds, threads=threads)
    ens = metrics.ensemble_mse(traces)
    m = ens.mean_sq_err
    tail = max(1, len(m) // 10)
    try:
        rate = metrics.fit_rate(m)
    except (WindowTooSmall, ValueError):
        rate = None
    return AlgorithmResult(
        spec=spec,
        step=step,
        traces=traces,
        ensemble=ens,
        rate=rate,
        final_window_mse=float(m[-tail:].mean()),
        update_fraction=metrics.update_fraction(traces),
    )


def _fmt(x) -> str:
    return repr(float(x))


def write_results_csv(path: Path, results: list[AlgorithmResult]) -> None:
    lines = [CSV_HEADER]
    for res in results:
        kept = [tr for tr in res.traces if not tr.diverged]
        mean_mask = np.stack([tr.update_mask for tr in kept]).mean(axis=0)
        updates_cum = np.concatenate([[0.0], np.cumsum(mean_mask)])
        m = res.ensemble.mean_sq_err
        ci = res.ensemble.ci_half_width
        for t in range(len(m)):
            ci_txt = "" if ci is None else _fmt(ci[t])
            lines.append(
                f"{t},{res.spec.name},{_fmt(m[t])},{ci_txt},{_fmt(updates_cum[t])}"
            )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def summary_payload(cfg: ExperimentConfig, results: list[AlgorithmResult]) -> dict:
    algos = {}
    for res in results:
        rate = None
        if res.rate is not None:
            rate = {
                "rate": res.rate.rate,
                "floor": res.rate.floor,
                "r_squared": res.rate.r_squared,
                "fit_window": list(res.rate.fit_window),
            }
        algos[res.spec.name] = {
            "alpha": res.step.alpha,
            "tau_mix": res.step.tau_mix,
            "tau_bar": res.step.tau_bar,
            "r0_sq": float(res.ensemble.mean_sq_err[0]),
            "final_window_mse": res.final_window_mse,
            "rate_fit": rate,
            "update_fraction": res.update_fraction,
            "n_seeds": res.ensemble.n_seeds,
            "diverged_count": res.ensemble.diverged_count,
        }
    return {"name": cfg.name, "T": cfg.T, "n_seeds": cfg.n_seeds, "algorithms": algos}


def write_plot(path: Path, results: list[AlgorithmResult]) -> None:
    import matplotlib

    matplotlib.use("Agg", force=True)
    from matplotlib import pyplot as plt

    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    for res in results:
        m = res.ensemble.mean_sq_err
        ax.plot(np.arange(len(m)), m, lw=1.1, label=res.spec.name)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean squared error")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def run_experiment(cfg: ExperimentConfig, out_dir: Path, threads: int | None = None) -> dict:
    op = build_problem(cfg)
    results = [run_algorithm(op, spec, cfg, threads=threads) for spec in cfg.algorithms]
    out_dir.mkdir(parents=True, exist_ok=True)
    write_results_csv(out_dir / "results.csv", results)
    payload = summary_payload(cfg, results)
    (out_dir / "summary.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    write_plot(out_dir / "plot.svg", results)
    return payload


def cmd_run(cfg: ExperimentConfig, out_dir: Path, threads: int | None = None) -> int:
    payload = run_experiment(cfg, out_dir, threads=threads)
    for name, algo in payload["algorithms"].items():
        rate = algo["rate_fit"]["rate"] if algo["rate_fit"] else float("nan")
        print(
            f"{name}: alpha={algo['alpha']:.3g} final MSE={algo['final_window_mse']:.4g} "
            f"rate={rate:.3g} updates={algo['update_fraction']:.3f} "
            f"diverged={algo['diverged_count']}/{algo['n_seeds'] + algo['diverged_count']}"
        )
    print(f"artifacts written to {out_dir}")
    return EXIT_OK


def _sweep_config(cfg: ExperimentConfig, param: str, value: float) -> ExperimentConfig:
    out = copy.deepcopy(cfg)
    if param == "tau":
        out.delay = {"kind": "constant", "tau": int(value)}
        for spec in out.algorithms:
            if spec.rule_kind == "constant":
                spec.tau = int(value)
    elif param == "tau_max":
        out.delay = dict(out.delay)
        out.delay["tau_max"] = int(value)
    elif param == "alpha":
        for spec in out.algorithms:
            spec.step_mode = engine.ManualStep(float(value))
    elif param == "epsilon":
        for spec in out.algorithms:
            if spec.rule_kind == "delay-adaptive":
                spec.epsilon = float(value)
    else:
        raise ConfigInvalid(f"sweep parameter must be tau, tau_max, alpha, or epsilon; got {param!r}")
    return out


def cmd_sweep(
    cfg: ExperimentConfig,
    out_dir: Path,
    param: str | None = None,
    values: list[float] | None = None,
    threads: int | None = None,
) -> int:
    if param is None:
        if not cfg.sweep:
            raise ConfigInvalid("sweep needs a parameter: config 'sweep' block or --param")
        param = cfg.sweep["parameter"]
        values = [float(v) for v in cfg.sweep["values"]]
    if not values:
        raise ConfigInvalid("sweep needs at least one value")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    per_algo: dict[str, list[tuple[float, float]]] = {}
    for value in values:
        sub = _sweep_config(cfg, param, value)
        payload = run_experiment(sub, out_dir / f"{param}-{value:g}", threads=threads)
        for name, algo in payload["algorithms"].items():
            rate = algo["rate_fit"]["rate"] if algo["rate_fit"] else None
            tau_bar = algo["tau_bar"]
            if tau_bar is None:
                tau_bar = max(value, algo["tau_mix"] or 1) if param == "tau" else None
            rows.append((param, value, name, algo["alpha"], tau_bar, rate,
                         algo["rate_fit"]["floor"] if algo["rate_fit"] else None,
                         algo["rate_fit"]["r_squared"] if algo["rate_fit"] else None))
            if rate and tau_bar:
                per_algo.setdefault(name, []).append((float(tau_bar), float(rate)))
    lines = ["param,value,algo,alpha,tau_bar,rate,floor,r_squared"]
    for row in rows:
        lines.append(",".join("" if v is None else (v if isinstance(v, str) else _fmt(v))
                              for v in row))
    (out_dir / "scaling.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    slopes = {}
    for name, pts in per_algo.items():
        if len(pts) >= 2:
            x = np.log([p[0] for p in pts])
            y = np.log([p[1] for p in pts])
            slopes[name] = float(np.polyfit(x, y, 1)[0])
    payload = {"parameter": param, "values": values, "slope_log_rate_vs_log_tau_bar": slopes}
    (out_dir / "sweep_summary.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for name, slope in slopes.items():
        print(f"{name}: slope of log(rate) vs log(tau_bar) = {slope:.3f}")
    print(f"sweep artifacts written to {out_dir}")
    return EXIT_OK


def _check_entry(check: verify.BoundCheck) -> dict:
    return check.to_dict()


def _error_entry(name: str, exc: Exception) -> dict:
    return {
        "name": name,
        "holds": False,
        "max_ratio": None,
        "window": None,
        "tolerance": None,
        "skipped": False,
        "reason": f"{type(exc).__name__}: {exc}",
    }


def run_verification(cfg: ExperimentConfig, threads: int | None = None) -> dict:
    """Assumption audits plus every applicable bound check for the config."""
    opts = cfg.verify_opts or {}
    T = int(opts.get("T", 3000))
    n_seeds = int(opts.get("n_seeds", 30))
    drift_tau = int(opts.get("adaptive_drift_tau", 5))
    alpha_spec = opts.get("alpha", "theorem")
    tol = float(opts.get("tolerance", 0.05))

    op = build_problem(cfg)
    entries: list[dict] = []

    # assumption audits
    try:
        audited = operators.audit_constants(op)
        entries.append(
            {
                "name": "assumptions-audit",
                "holds": True,
                "max_ratio": None,
                "window": None,
                "tolerance": None,
                "skipped": False,
                "reason": f"mu_hat={audited.mu:.4g} L_hat={audited.L:.4g} sigma_hat={audited.sigma:.4g}",
            }
        )
    except MonotonicityViolation as exc:
        entries.append(_error_entry("assumptions-audit", exc))
        return {"checks": entries, "all_hold": False}

    sched = schedule.schedule_from_config(cfg.delay)
    if sched is None:
        sched = schedule.UniformSchedule(tau_max=20)
    tau_max = sched.tau_max
    c = op.constants()

    def resolve(rule, C):
        if alpha_spec == "theorem":
            return engine.resolve_step_size(op, rule, engine.TheoremStep(C))
        alpha = float(alpha_spec)
        tau_mix = chainmod.operator_mixing_time(op.chain, op, alpha)
        return engine.StepSizeInfo(alpha=alpha, tau_mix=tau_mix,
                                   tau_bar=max(tau_mix, engine.rule_delay_scale(rule)))

    tv_rule = engine.TimeVarying(sched)
    step2 = resolve(tv_rule, verify.BOUNDEDNESS_C)
    tv_cfg = engine.RunConfig(rule=tv_rule, alpha=step2.alpha, T=T, seed=cfg.seed_base,
                              record_iterates=True)
    tv_traces = engine.run_ensemble(op, tv_cfg, n_seeds, threads=threads)
    tv_ens = metrics.ensemble_mse(tv_traces)

    for check in verify.check_drift_lemma(tv_traces, op, step2.alpha, step2.tau_mix, tau_max, tol=tol):
        entries.append(_check_entry(check))
    try:
        entries.append(
            _check_entry(
                verify.check_uniform_boundedness(
                    tv_ens, c.sigma, step2.alpha, c.mu, c.L,
                    max(step2.tau_mix, tau_max, 1), tol=tol,
                )
            )
        )
    except StepSizeTooLarge as exc:
        entries.append(_error_entry("uniform-boundedness", exc))
    try:
        entries.append(
            _check_entry(
                verify.check_theorem_bound(
                    tv_traces, "two", c.mu, c.L, c.sigma, step2.alpha,
                    step2.tau_mix, tau_max, tol=tol,
                )
            )
        )
    except StepSizeTooLarge as exc:
        entries.append(_error_entry("theorem-two", exc))

    ad_probe = engine.DelayAdaptive(sched, epsilon=1.0)
    step3 = resolve(ad_probe, verify.ADAPTIVE_C)
    ad_rule = engine.DelayAdaptive(sched, epsilon=step3.alpha)
    ad_cfg = engine.RunConfig(rule=ad_rule, alpha=step3.alpha, T=T, seed=cfg.seed_base + 1,
                              record_iterates=True)
    ad_traces = engine.run_ensemble(op, ad_cfg, n_seeds, threads=threads)

    drift_checks = [
        verify.check_adaptive_drift(tr, step3.alpha, c.L, step3.alpha, c.sigma, drift_tau)
        for tr in ad_traces if not tr.diverged
    ]
    live = [ch for ch in drift_checks if not ch.skipped]
    if live:
        worst = max(live, key=lambda ch: ch.max_ratio)
        worst.name = "adaptive-drift"
        entries.append(_check_entry(worst))
    elif drift_checks:
        entries.append(_check_entry(drift_checks[0]))
    try:
        entries.append(
            _check_entry(
                verify.check_theorem_bound(
                    ad_traces, "three", c.mu, c.L, c.sigma, step3.alpha,
                    step3.tau_mix, tau_max, epsilon=step3.alpha, tol=tol,
                )
            )
        )
    except StepSizeTooLarge as exc:
        entries.append(_error_entry("theorem-three", exc))

    counts = np.array([tr.update_mask.sum() for tr in ad_traces if not tr.diverged], dtype=float)
    needs = np.array(
        [tr.T / (4.0 * tr.delays.mean() + 4.0) for tr in ad_traces if not tr.diverged]
    )
    ratio = float((needs / counts).max())
    entries.append(
        {
            "name": "update-count",
            "holds": bool(ratio <= 1.0),
            "max_ratio": ratio,
            "window": None,
            "tolerance": 0.0,
            "skipped": False,
            "reason": None,
        }
    )

    all_hold = all(e["holds"] for e in entries if not e.get("skipped"))
    return {"checks": entries, "all_hold": bool(all_hold)}


def cmd_verify(cfg: ExperimentConfig, out_dir: Path, threads: int | None = None) -> int:
    report = run_verification(cfg, threads=threads)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "verification.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for e in report["checks"]:
        if e.get("skipped"):
            status = "SKIP"
        else:
            status = "PASS" if e["holds"] else "FAIL"
        extra = f" ({e['reason']})" if e.get("reason") else ""
        ratio = f" max_ratio={e['max_ratio']:.4g}" if e.get("max_ratio") is not None else ""
        print(f"[{status}] {e['name']}{ratio}{extra}")
    print(f"report written to {out_dir / 'verification.json'}")
    return EXIT_OK if report["all_hold"] else EXIT_VERIFY


def bundled_config(name: str) -> ExperimentConfig:
    text = resources.files("delaysa.configs").joinpath(name).read_text()
    return parse_config(json.loads(text), name=name.removesuffix(".json"))


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="delaysa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        if config_required:
            p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seeds", type=int, default=None, help="override n_seeds")
        p.add_argument("--threads", type=int, default=None,
                       help="worker processes (default: DELAYSA_THREADS or all CPUs)")

    common(sub.add_parser("run", help="run the configured ensemble"))
    p_sweep = sub.add_parser("sweep", help="run over a parameter grid and fit rate scaling")
    common(p_sweep)
    p_sweep.add_argument("--param", choices=["tau", "tau_max", "alpha", "epsilon"])
    p_sweep.add_argument("--values", help="comma-separated sweep values")
    common(sub.add_parser("verify", help="run assumption audits and bound checks"))
    common(sub.add_parser("reproduce-appendix", help="run the bundled delayed-TD comparison"),
           config_required=False)

    args = parser.parse_args(argv)
    try:
        if args.command == "reproduce-appendix":
            cfg = bundled_config("appendix_h.json")
        else:
            cfg = load_config(args.config)
        if args.seeds is not None:
            cfg.n_seeds = args.seeds
        out_dir = Path(args.out)
        if args.command in ("run", "reproduce-appendix"):
            return cmd_run(cfg, out_dir, threads=args.threads)
        if args.command == "sweep":
            values = None
            if args.values:
                values = [float(v) for v in args.values.split(",")]
            return cmd_sweep(cfg, out_dir, param=args.param, values=values,
                             threads=args.threads)
        return cmd_verify(cfg, out_dir, threads=args.threads)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DelaySAError as exc:
        if isinstance(exc, AllDiverged):
            print(f"divergence: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
