"""Command-line entry point: ``blipmeta <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .federation import (CollectionError, SummaryRejected, collect, decode_summary,
                         read_summary_dir, serve_site, validate_summary,
                         write_summary)
from .itr import Rule, decide_binary, decide_dose, evaluate_rule
from .model import ModelError, SiteDataset, TreatmentKind
from .onestage import OneStageModel, run_onestage
from .posterior import write_posterior
from .simgen import simulate_replicate
from .stageone import fit_site, summarize_site
from .stagetwo import assemble_likelihood, run_mcmc, select_interactions
from .study import (DEFAULT_REPLICATES, FULL_SCALE_REPLICATES, StudyConfig, metrics_csv,
                    replicates_csv, report_bytes, run_study)

log = logging.getLogger("blipmeta")


def _host_port(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}") from None


def _pool_and_write(summaries, cfg, seed, out, command):
    spec = C.model_spec(cfg)
    pri = C.priors(cfg, spec)
    mc = C.McmcSettings.from_config(cfg)
    graph = assemble_likelihood(summaries, spec.psi_labels, spec.blip_intercepts)
    post = run_mcmc(graph, pri, mc.chains, mc.warmup, mc.kept, seed)
    selected = select_interactions(post) if post.horseshoe else []
    draws, summary = write_posterior(post, out, selected)
    C.write_manifest(out, command, cfg, seed, {"sites": [s.site_id for s in summaries]})
    print(summary)
    return post


# -- subcommands ------------------------------------------------------------------

def cmd_simulate(args):
    cfg = C.load_config(args.config)
    seed = C.resolve_seed(cfg, args.seed)
    sc = C.scenario(cfg, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = simulate_replicate(sc, args.replicate)
    for d in rep.datasets:
        d.to_csv(out / f"{d.site_id}.csv")
    (out / "model.json").write_text(json.dumps(sc.spec.to_dict(), indent=2) + "\n")
    truth = {"scenario": sc.to_dict(), "replicate": args.replicate,
             "site_beta": rep.site_beta.tolist(), "site_psi": rep.site_psi.tolist(), **rep.log}
    (out / "truth.json").write_text(json.dumps(truth, indent=2) + "\n")
    C.write_manifest(out, "simulate", cfg, seed, {"replicate": args.replicate})
    print(f"wrote {len(rep.datasets)} site files to {out}")


def cmd_fit_site(args):
    cfg = C.load_config(args.config)
    spec = C.model_spec(cfg)
    data = SiteDataset.from_csv(args.data, args.site_id)
    site = fit_site(spec, data)
    summary = summarize_site(spec, site.fit, site.mapping, data.site_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(write_summary(summary, out))


def cmd_pool(args):
    cfg = C.load_config(args.config)
    spec = C.model_spec(cfg)
    fp = spec.fingerprint()
    if args.summaries == "-":
        docs = [line for line in sys.stdin.read().splitlines() if line.strip()]
        summaries = sorted((validate_summary(d, fp, spec.n_psi) for d in docs),
                           key=lambda s: s.site_id)
    else:
        summaries = read_summary_dir(args.summaries, fp, spec.n_psi)
    _pool_and_write(summaries, cfg, C.resolve_seed(cfg, args.seed), args.out, "pool")


def cmd_fit_pooled(args):
    cfg = C.load_config(args.config)
    spec = C.model_spec(cfg)
    seed = C.resolve_seed(cfg, args.seed)
    mc = C.McmcSettings.from_config(cfg)
    paths = []
    for p in args.data:
        p = Path(p)
        paths += sorted(p.glob("*.csv")) if p.is_dir() else [p]
    datasets = tuple(SiteDataset.from_csv(p) for p in paths)
    post = run_onestage(OneStageModel(spec, datasets, C.priors(cfg, spec)),
                        mc.chains, mc.warmup, mc.kept, seed)
    selected = select_interactions(post) if post.horseshoe else []
    _, summary = write_posterior(post, args.out, selected)
    C.write_manifest(args.out, "fit-pooled", cfg, seed, {"sites": [d.site_id for d in datasets]})
    print(summary)


def _rule_from_summary(spec, path, point) -> Rule:
    doc = json.loads(Path(path).read_text())
    params = doc["parameters"]
    labels = spec.psi_labels
    missing = [l for l in labels if l not in params]
    if missing:
        raise ModelError(f"summary has no estimate for {missing}")
    key = "mean" if point == "mean" else "median"
    return Rule(spec, np.array([params[l][key] for l in labels]))


def _apply_selection(spec, rule: Rule, cfg, summary_path) -> Rule:
    """Zero horseshoe-tagged parameters that the pooled run did not select."""
    pri = C.priors(cfg, spec)
    hs = pri.horseshoe_indices()
    if not hs:
        return rule
    doc = json.loads(Path(summary_path).read_text())
    chosen = set(doc.get("selected", []))
    psi = rule.psi.copy()
    for t in hs:
        if spec.psi_labels[t] not in chosen:
            psi[t] = 0.0
    return Rule(spec, psi)


def cmd_evaluate(args):
    cfg = C.load_config(args.config)
    seed = C.resolve_seed(cfg, args.seed)
    sc = C.scenario(cfg, seed)
    spec = sc.spec
    point = args.point or cfg.get("rule", {}).get("point", "mean")
    rule = _apply_selection(spec, _rule_from_summary(spec, args.summary, point), cfg, args.summary)
    ev = evaluate_rule(rule, sc, args.cohort_size, seed)
    doc = ev.to_dict() | {"rule": rule.to_dict()}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        C.write_manifest(Path(args.out).parent, "evaluate", cfg, seed)
    print(text, end="")


def cmd_recommend(args):
    cfg = C.load_config(args.config)
    spec = C.model_spec(cfg)
    point = args.point or cfg.get("rule", {}).get("point", "median")
    rule = _apply_selection(spec, _rule_from_summary(spec, args.summary, point), cfg, args.summary)
    with open(args.data, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        header = reader.fieldnames or []
    cols = [c for c in header if c in spec.covariates]
    x = np.array([[float(r[c]) for c in cols] for r in rows]).reshape(len(rows), len(cols))
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(out, lineterminator="\n")
    if spec.treatment_kind is TreatmentKind.BINARY:
        d = decide_binary(rule, x, cols)
        w.writerow([*header, "treat"])
        for r, v in zip(rows, d):
            w.writerow([r[h] for h in header] + [int(v)])
    else:
        bounds = tuple(args.bounds) if args.bounds else tuple(
            cfg.get("rule", {}).get("dose_bounds", (-np.inf, np.inf)))
        dec = decide_dose(rule, x, bounds, cols)
        flagged = set(dec.nonconcave_rows)
        w.writerow([*header, "dose", "nonconcave"])
        for i, (r, v) in enumerate(zip(rows, dec.doses)):
            w.writerow([r[h] for h in header] + [repr(float(v)), int(i in flagged)])
        log.info("clipped low %d, high %d, non-concave %d", dec.clipped_low, dec.clipped_high,
                 len(flagged))
    if args.out:
        out.close()


def cmd_serve_site(args):
    paths = []
    for p in args.summaries:
        p = Path(p)
        paths += sorted(p.glob("*.summary.json")) if p.is_dir() else [p]
    summaries = [decode_summary(p.read_bytes()) for p in paths]
    if not summaries:
        raise ModelError("no summaries to send")
    fp = None
    if args.config:
        fp = C.model_spec(C.load_config(args.config)).fingerprint()
    replies = serve_site(args.listen, summaries, fp, args.timeout)
    for r in replies:
        print(json.dumps(r, sort_keys=True))
    if any(r.get("type") != "ACK" for r in replies):
        return 3
    return 0


def cmd_collect(args):
    cfg = C.load_config(args.config)
    spec = C.model_spec(cfg)
    fp = spec.fingerprint()
    if args.fingerprint and args.fingerprint != fp:
        raise ModelError(f"--fingerprint {args.fingerprint} does not match the model config ({fp})")
    host, port = args.bind

    def ready(addr):
        print(f"listening on {addr[0]}:{addr[1]}", flush=True)

    summaries = collect(args.expect, fp, host, port, args.timeout, args.allow_partial,
                        spec.n_psi, on_ready=ready)
    if args.archive:
        arch = Path(args.out) / "summaries"
        arch.mkdir(parents=True, exist_ok=True)
        for s in summaries:
            write_summary(s, arch)
    _pool_and_write(summaries, cfg, C.resolve_seed(cfg, args.seed), args.out, "collect")


def cmd_run_study(args):
    cfg = C.load_config(args.config)
    seed = C.resolve_seed(cfg, args.seed)
    sc = C.scenario(cfg, seed)
    st = dict(cfg.get("study", {}))
    mc = C.McmcSettings.from_config(cfg)
    reps = args.replicates or (FULL_SCALE_REPLICATES if args.full_scale else
                               int(st.get("replicates", DEFAULT_REPLICATES)))
    study = StudyConfig(
        scenario=sc, replicates=reps, priors=cfg.get("priors", {}), n_chains=mc.chains,
        n_warmup=mc.warmup, n_kept=mc.kept,
        cohort_size=int(st.get("cohort_size", 100_000)),
        point=st.get("point", "mean"), onestage=args.onestage or bool(st.get("onestage", False)),
        workers=args.workers or int(st.get("workers", 1)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(done, total):
        if done % 10 == 0 or done == total:
            log.info("%d/%d replicates", done, total)

    result = run_study(study, progress)
    (out / "metrics.csv").write_text(metrics_csv(result.metrics))
    (out / "replicates.csv").write_text(replicates_csv(result))
    C.write_manifest(out, "run-study", cfg, seed, {
        "scenario_name": study.name, "replicates": reps, "failures": result.failures,
        "replicate_logs": [r.log for r in result.results if r.method == "two_stage"]})
    print(out / "metrics.csv")


def cmd_report(args):
    paths = []
    for p in args.inputs:
        p = Path(p)
        paths += sorted(p.rglob("metrics.csv")) if p.is_dir() else [p]
    data = report_bytes(paths)
    if args.out:
        Path(args.out).write_bytes(data)
    else:
        sys.stdout.write(data.decode())


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blipmeta", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        return p

    p = add("simulate", cmd_simulate, "write one simulated replicate as per-site CSVs")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--seed", type=int)

    p = add("fit-site", cmd_fit_site, "stage-one fit of one site; writes <site>.summary.json")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--site-id")
    p.add_argument("--out", required=True)

    p = add("pool", cmd_pool, "stage-two pooling of a directory of site summaries")
    p.add_argument("--config", required=True)
    p.add_argument("--summaries", required=True, help="directory, or '-' for JSON lines on stdin")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = add("fit-pooled", cmd_fit_pooled, "one-stage fit on individual-level site CSVs")
    p.add_argument("--config", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = add("evaluate", cmd_evaluate, "value-function evaluation against a scenario truth")
    p.add_argument("--config", required=True)
    p.add_argument("--summary", required=True)
    p.add_argument("--cohort-size", type=int, default=100_000)
    p.add_argument("--point", choices=["mean", "median"])
    p.add_argument("--out")
    p.add_argument("--seed", type=int)

    p = add("recommend", cmd_recommend, "per-row treatment or dose from a pooled summary")
    p.add_argument("--config", required=True)
    p.add_argument("--summary", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--point", choices=["mean", "median"])
    p.add_argument("--bounds", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--out")

    p = add("serve-site", cmd_serve_site, "send site summaries to a coordinator over TCP")
    p.add_argument("--listen", type=_host_port, required=True,
                   help="coordinator address HOST:PORT")
    p.add_argument("--summaries", nargs="+", required=True)
    p.add_argument("--config")
    p.add_argument("--timeout", type=float, default=None)

    p = add("collect", cmd_collect, "coordinator: receive K summaries over TCP, then pool")
    p.add_argument("--config", required=True)
    p.add_argument("--expect", type=int, required=True)
    p.add_argument("--fingerprint")
    p.add_argument("--bind", type=_host_port, default=("127.0.0.1", 0))
    p.add_argument("--timeout", type=float, default=None)
    p.add_argument("--allow-partial", action="store_true")
    p.add_argument("--archive", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = add("run-study", cmd_run_study, "replicated simulation study; writes metrics.csv")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--replicates", type=int)
    p.add_argument("--full-scale", action="store_true")
    p.add_argument("--onestage", action="store_true")
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)

    p = add("report", cmd_report, "merge metrics CSVs into one JSON report")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--out")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args) or 0)
    except (C.ConfigError, ModelError, SummaryRejected, CollectionError, ValueError, OSError) as e:
        print(f"blipmeta {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
