"""Batch runner: ``regimes <method> --config run.json --out DIR``.

The config is one JSON object::

    {"input": {"counts": {...} | [...], "taxonomy": null,
               "prevalence": 0.2, "transform": null},
     "params": {...method options...},
     "seed": 0, "threads": 1}

Unknown keys anywhere are rejected. Relative paths resolve against the
config file's directory. Outputs are written to a temporary directory and
moved into place only after the method finishes; ``manifest.json`` is
written last.
"""

import argparse
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from ._stats import NumericalError, substream
from .basic import BetaBernoulli, GaussianNIG, GridPrior, fit_basic
from .cart import TreeConfig, extract_partition, fit_hurdle, fit_tree, grid_features, prune
from .core import DistanceSpec, apply_transform, cluster_summaries, cut_tree, hclust, pairwise_distance
from .gp import GpModel, KernelParams, gp_posterior, optimize_hyperparams
from .hmm_bayes import HdpConfig, StickyConfig, effective_state_count, hdp_hmm_gibbs, sticky_hmm_gibbs
from .hmm_em import em_fit_pooled
from .imgpe import HmcConfig, cooccurrence, fit_imgpe
from .io import IngestError, heatmap_rows, ingest, write_tsv, HEATMAP_HEADER
from .lds import LdsParams, TobitConfig, scan_sampler_dtm
from .slds import SldsConfig, fit_slds, parameter_sequence_clustering

log = logging.getLogger("regimes")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# method defaults; every key here is accepted and nothing else

DEFAULTS = {
    "hclust": {"distance": "euclidean", "weights": None, "jaccard_union": False,
               "linkage": "average", "k": 2},
    "cart": {"max_splits": 10, "penalty": 0.0, "min_leaf": 5, "hurdle": True,
             "order": "hclust", "linkage": "average"},
    "lds-demo": {"A": 1.0, "C": 1.0, "Q": 0.1, "R": 0.1, "threshold": 0.0,
                 "iterations": 100, "burn_in": 20},
    "gp": {"sf2": 1.0, "lengthscale": 1.0, "noise": 0.1, "objective": "marginal",
           "budget": 50, "center": True},
    "hmm-em": {"K": 2, "max_iter": 100, "tol": 1e-6, "covariance": "auto", "cov_floor": 1e-6},
    "hmm-sticky": {"K": 2, "alpha": 1.0, "kappa": 0.0, "iterations": 500, "burn_in": 100,
                   "thin": 1},
    "hdp-hmm": {"L": 10, "gamma": 1.0, "alpha": 1.0, "kappa": 0.0, "iterations": 500,
                "burn_in": 100, "thin": 1, "crt": "printed"},
    "imgpe": {"alpha": 0.15, "stepsize": 0.005, "steps": 5, "iterations": 500, "burn_in": 100},
    "slds": {"K": 2, "dim": 1, "alpha": 1.0, "iterations": 300, "burn_in": 100, "thin": 1,
             "linkage": "average"},
    "basic": {"model": "gaussian", "mu0": None, "lam0": 1.0, "a0": 1.0, "b0": 1.0,
              "grid": 50, "iterations": 200, "eb_rounds": 1, "burn_in": None},
}
METHODS = tuple(DEFAULTS)
INPUT_DEFAULTS = {"counts": None, "taxonomy": None, "prevalence": 0.2, "transform": None}
TOP_KEYS = {"input", "params", "seed", "threads"}


def _check_type(name, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{name}: expected {type(default).__name__}, got {value!r}")
    return value


def _merge(block, defaults, where):
    block = {} if block is None else block
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = sorted(set(block) - set(defaults))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return {k: _check_type(f"{where}.{k}", block.get(k, v), v) for k, v in defaults.items()}


def materialize(method, raw, base_dir=".", seed=None, threads=None):
    """Validate a raw config and fill every default."""
    if method not in DEFAULTS:
        raise ConfigError(f"unknown method {method!r}")
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    inp = _merge(raw.get("input"), INPUT_DEFAULTS, "input")
    counts = inp["counts"]
    if not counts:
        raise ConfigError("input.counts is required")
    base = Path(base_dir)
    res = lambda p: str((base / p).resolve()) if not os.path.isabs(p) else p
    if isinstance(counts, dict):
        inp["counts"] = {str(k): res(v) for k, v in counts.items()}
    elif isinstance(counts, list):
        inp["counts"] = {Path(p).stem: res(p) for p in counts}
    else:
        raise ConfigError("input.counts must be an object or a list of paths")
    if inp["taxonomy"]:
        inp["taxonomy"] = res(inp["taxonomy"])
    params = _merge(raw.get("params"), DEFAULTS[method], "params")
    seed = raw.get("seed", 0) if seed is None else seed
    threads = raw.get("threads", 1) if threads is None else threads
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    if not isinstance(threads, int) or threads < 1:
        raise ConfigError("threads must be a positive integer")
    return {"method": method, "input": inp, "params": params, "seed": seed, "threads": threads}


def config_hash(cfg):
    """Hash of the materialized config, excluding the thread count."""
    body = {k: v for k, v in cfg.items() if k != "threads"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# helpers

_METHOD_KEY = {m: i for i, m in enumerate(METHODS)}


def _pmap(fn, items, threads):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _series(panel):
    """(subject index, species index) pairs in panel order."""
    return [(s, j) for s in range(len(panel.subjects)) for j in range(panel.n_species)]


def _rng(cfg, *key):
    return substream(cfg["seed"], _METHOD_KEY[cfg["method"]], *key)


def _heat(panel, blocks_by_subject, kind):
    rows = []
    for s, vals in enumerate(blocks_by_subject):
        rows += heatmap_rows(panel.subjects[s], panel.species, panel.times[s], vals, kind)
    return rows


# --------------------------------------------------------------------------
# method runners: each returns {filename: (header, rows)}

def run_hclust(panel, p, cfg):
    x = panel.species_matrix()
    if p["distance"] == "mixture":
        spec = DistanceSpec("mixture", p["weights"] or {}, p["jaccard_union"])
    else:
        spec = DistanceSpec(p["distance"], jaccard_union=p["jaccard_union"])
    d = hclust(pairwise_distance(x, spec), x, p["linkage"])
    k = min(p["k"], panel.n_species)
    labels = cut_tree(d, k)
    summ = cluster_summaries(panel, labels)
    order = [panel.species[i] for i in d.leaf_order]
    heat = []
    for s, subj in enumerate(panel.subjects):
        heat += heatmap_rows(subj, order, panel.times[s], panel.counts[s][d.leaf_order], "value")
    return {
        "leaf_order.tsv": (("position", "species"), list(enumerate(order))),
        "merges.tsv": (("step", "left", "right", "height"),
                       [(i, l, r, float(h)) for i, (l, r, h) in enumerate(d.merges)]),
        "labels.tsv": (("species", "cluster"), list(zip(panel.species, labels.tolist()))),
        "summaries.tsv": (("cluster", "subject", "time", "presence", "conditional_mean"),
                          [(c.cluster, c.subject, float(t), float(pr), float(cm))
                           for c in summ for t, pr, cm in zip(c.times, c.presence, c.conditional_mean)]),
        "heatmap.tsv": (HEATMAP_HEADER, heat),
    }


def run_cart(panel, p, cfg):
    if p["order"] == "hclust" and panel.n_species > 1:
        x = panel.species_matrix()
        order = hclust(pairwise_distance(x), x, p["linkage"]).leaf_order
    elif p["order"] in ("hclust", "input"):
        order = list(range(panel.n_species))
    else:
        raise ConfigError("params.order must be 'hclust' or 'input'")
    tc = TreeConfig(p["max_splits"], p["penalty"], p["min_leaf"])
    rects, heat = [], []
    for s, subj in enumerate(panel.subjects):
        X, y = grid_features(panel.counts[s], order, panel.times[s])
        parts = {}
        if p["hurdle"]:
            fit = fit_hurdle(X, y, tc)
            parts["presence"] = prune(fit.binary, p["penalty"])
            if not fit.conditional_absent:
                parts["conditional"] = prune(fit.conditional, p["penalty"])
        else:
            parts["value"] = prune(fit_tree(X, y, tc), p["penalty"])
        for part, tree in parts.items():
            for r, rect in enumerate(extract_partition(tree)):
                rects.append((subj, part, r, float(rect.lo[0]), float(rect.hi[0]),
                               float(rect.lo[1]), float(rect.hi[1]), float(rect.value)))
            pred = tree.predict(X).reshape(panel.counts[s].shape).astype(float)
            heat += heatmap_rows(subj, panel.species, panel.times[s], pred, part)
    return {
        "partition.tsv": (("subject", "part", "leaf", "order_lo", "order_hi", "time_lo",
                           "time_hi", "value"), rects),
        "heatmap.tsv": (HEATMAP_HEADER, heat),
    }


def run_lds_demo(panel, p, cfg):
    params = LdsParams.scalar(p["A"], p["C"], p["Q"], p["R"])
    if not 0 <= p["burn_in"] < p["iterations"]:
        raise ConfigError("need 0 <= burn_in < iterations")

    def one(key):
        s, j = key
        seed = int(_rng(cfg, s, j).integers(2**63 - 1))
        y = panel.counts[s][j]
        draws = scan_sampler_dtm(params, y, TobitConfig(p["threshold"], p["iterations"], seed))
        return draws[p["burn_in"]:].mean(axis=0)

    keys = _series(panel)
    means = _pmap(one, keys, cfg["threads"])
    blocks = [np.zeros_like(c) for c in panel.counts]
    for (s, j), m in zip(keys, means):
        blocks[s][j] = m
    return {"heatmap.tsv": (HEATMAP_HEADER, _heat(panel, blocks, "latent_mean"))}


def run_gp(panel, p, cfg):
    kern = KernelParams.from_natural(p["sf2"], p["lengthscale"])

    def one(key):
        s, j = key
        t = panel.times[s]
        y = panel.counts[s][j]
        off = y.mean() if p["center"] else 0.0
        m, trace = optimize_hyperparams(GpModel(kern, p["noise"], t, y - off),
                                        p["objective"], p["budget"])
        return gp_posterior(m, t).mean + off, m, trace[-1]

    keys = _series(panel)
    fits = _pmap(one, keys, cfg["threads"])
    blocks = [np.zeros_like(c) for c in panel.counts]
    hyper = []
    for (s, j), (mean, m, obj) in zip(keys, fits):
        blocks[s][j] = mean
        hyper.append((panel.subjects[s], panel.species[j], m.kernel.sf2,
                      float(np.exp(m.kernel.log_ls[0])), float(m.noise), float(obj)))
    return {
        "heatmap.tsv": (HEATMAP_HEADER, _heat(panel, blocks, "gp_mean")),
        "hyperparams.tsv": (("subject", "species", "sf2", "lengthscale", "noise", "objective"),
                            hyper),
    }


def _sequences(panel):
    return [c.T for c in panel.counts]


def _state_rows(panel, freqs):
    rows = []
    for s, f in enumerate(freqs):
        for t, row in zip(panel.times[s], f):
            rows.append((panel.subjects[s], float(t), int(np.argmax(row)), float(np.max(row))))
    return rows


def _transition_rows(mean, se=None):
    K = mean.shape[0]
    return [(a, b, float(mean[a, b])) + (() if se is None else (float(se[a, b]),))
            for a in range(K) for b in range(K)]


def run_hmm_em(panel, p, cfg):
    rng = _rng(cfg, 0)
    res = em_fit_pooled(_sequences(panel), p["K"], max_iter=p["max_iter"], tol=p["tol"],
                        seed=rng, covariance=p["covariance"], cov_floor=p["cov_floor"],
                        threads=cfg["threads"])
    prm = res.params
    return {
        "states.tsv": (("subject", "time", "state", "probability"),
                       _state_rows(panel, [m.gamma for m in res.marginals])),
        "transitions.tsv": (("from", "to", "probability"), _transition_rows(prm.P)),
        "means.tsv": (("state", "species", "mean"),
                      [(k, sp, float(prm.means[k, j])) for k in range(prm.K)
                       for j, sp in enumerate(panel.species)]),
        "loglik.tsv": (("iteration", "loglik"), list(enumerate(map(float, res.loglik_trace)))),
    }


def _chain_outputs(panel, chain, K):
    mean, se = chain.transition_summary()
    freqs = [chain.state_frequencies(s, K) for s in range(len(panel.subjects))]
    return {
        "states.tsv": (("subject", "time", "state", "frequency"), _state_rows(panel, freqs)),
        "transitions.tsv": (("from", "to", "mean", "se"), _transition_rows(mean, se)),
    }


def run_hmm_sticky(panel, p, cfg):
    seed = int(_rng(cfg, 0).integers(2**63 - 1))
    sc = StickyConfig(K=p["K"], alpha=p["alpha"], kappa=p["kappa"], iterations=p["iterations"],
                      burn_in=p["burn_in"], thin=p["thin"], seed=seed)
    return _chain_outputs(panel, sticky_hmm_gibbs(_sequences(panel), sc), p["K"])


def run_hdp_hmm(panel, p, cfg):
    seed = int(_rng(cfg, 0).integers(2**63 - 1))
    hc = HdpConfig(L=p["L"], gamma=p["gamma"], alpha=p["alpha"], kappa=p["kappa"],
                   iterations=p["iterations"], burn_in=p["burn_in"], thin=p["thin"],
                   seed=seed, crt=p["crt"])
    chain = hdp_hmm_gibbs(_sequences(panel), hc)
    out = _chain_outputs(panel, chain, p["L"])
    out["summary.tsv"] = (("statistic", "value"),
                          [("effective_states", float(effective_state_count(chain)))])
    return out


def run_imgpe(panel, p, cfg):
    hc = HmcConfig(p["stepsize"], p["steps"])
    if not 0 <= p["burn_in"] < p["iterations"]:
        raise ConfigError("need 0 <= burn_in < iterations")

    def one(key):
        s, j = key
        seed = int(_rng(cfg, s, j).integers(2**63 - 1))
        chain = fit_imgpe(panel.times[s], panel.counts[s][j], p["alpha"], hc,
                          p["iterations"], seed)
        kept = chain.assignments[p["burn_in"]:]
        return cooccurrence(kept) / kept.shape[0], chain.n_clusters[p["burn_in"]:]

    keys = _series(panel)
    fits = _pmap(one, keys, cfg["threads"])
    co, counts = [], []
    for (s, j), (C, nc) in zip(keys, fits):
        t = panel.times[s]
        subj, sp = panel.subjects[s], panel.species[j]
        co += [(subj, sp, float(t[a]), float(t[b]), float(C[a, b]))
               for a in range(t.size) for b in range(t.size)]
        vals, cnt = np.unique(nc, return_counts=True)
        counts.append((subj, sp, int(vals[np.argmax(cnt)]), float(nc.mean())))
    return {
        "cooccurrence.tsv": (("subject", "species", "time_a", "time_b", "frequency"), co),
        "clusters.tsv": (("subject", "species", "modal_clusters", "mean_clusters"), counts),
    }


def run_slds(panel, p, cfg):
    def one(key):
        s, j = key
        seed = int(_rng(cfg, s, j).integers(2**63 - 1))
        y = panel.counts[s][j]
        sc = SldsConfig(K=p["K"], dim=p["dim"], alpha=p["alpha"], iterations=p["iterations"],
                        burn_in=p["burn_in"], thin=p["thin"], seed=seed)
        return fit_slds(y - y.mean(), sc)

    keys = _series(panel)
    chains = _pmap(one, keys, cfg["threads"])
    freq_rows, param_rows = [], []
    for (s, j), ch in zip(keys, chains):
        z = np.array(ch.z)
        for k in range(p["K"]):
            freq = (z == k).mean(axis=0)
            for t, f in zip(panel.times[s], freq):
                freq_rows.append((panel.subjects[s], panel.species[j], float(t), k, float(f)))
    for s, subj in enumerate(panel.subjects):
        idx = [i for i, (ss, _) in enumerate(keys) if ss == s]
        if len(idx) < 2:
            continue
        pc = parameter_sequence_clustering([chains[i] for i in idx], p["linkage"])
        ids = [panel.species[keys[i][1]] for i in idx]
        param_rows += [(subj,) + r for r in pc.export_rows(ids)]
    return {
        "regimes.tsv": (("subject", "species", "time", "regime", "frequency"), freq_rows),
        "parameters.tsv": (("subject", "species", "t", "param", "posterior_mean", "clipped"),
                           param_rows),
    }


def run_basic(panel, p, cfg):
    if p["model"] == "gaussian":
        model = GaussianNIG(p["mu0"], p["lam0"], p["a0"], p["b0"])
    elif p["model"] == "bernoulli":
        model = BetaBernoulli(p["a0"], p["b0"])
    else:
        raise ConfigError("params.model must be 'gaussian' or 'bernoulli'")

    def one(s):
        seed = int(_rng(cfg, s).integers(2**63 - 1))
        return fit_basic(panel.counts[s], model, GridPrior.uniform(p["grid"]), p["iterations"],
                         p["eb_rounds"], p["burn_in"], seed)

    fits = _pmap(one, list(range(len(panel.subjects))), cfg["threads"])
    prior_rows = [(panel.subjects[s], float(q), float(w))
                  for s, f in enumerate(fits) for q, w in zip(f.prior.q, f.prior.w)]
    return {
        "heatmap.tsv": (HEATMAP_HEADER, _heat(panel, [f.frequencies for f in fits], "changepoint")),
        "prior.tsv": (("subject", "q", "w"), prior_rows),
    }


RUNNERS = {
    "hclust": run_hclust, "cart": run_cart, "lds-demo": run_lds_demo, "gp": run_gp,
    "hmm-em": run_hmm_em, "hmm-sticky": run_hmm_sticky, "hdp-hmm": run_hdp_hmm,
    "imgpe": run_imgpe, "slds": run_slds, "basic": run_basic,
}


# --------------------------------------------------------------------------
# driver

def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(cfg, out_dir):
    """Execute a materialized config; returns the manifest dict."""
    out_dir = Path(out_dir)
    timings = {}
    t0 = time.perf_counter()
    try:
        panel = ingest(cfg["input"]["counts"], cfg["input"]["taxonomy"], cfg["input"]["prevalence"])
        if cfg["input"]["transform"]:
            panel = apply_transform(panel, cfg["input"]["transform"])
    except (OSError, ValueError) as exc:
        raise ConfigError(f"input: {exc}") from exc
    if panel.n_species == 0:
        raise ConfigError("input: no species pass the prevalence filter")
    timings["ingest"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    try:
        tables = RUNNERS[cfg["method"]](panel, cfg["params"], cfg)
    except (ConfigError, NumericalError):
        raise
    except ValueError as exc:
        raise ConfigError(f"{cfg['method']}: {exc}") from exc
    timings["method"] = time.perf_counter() - t0

    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".regimes-", dir=out_dir.parent))
    try:
        for name, (header, rows) in tables.items():
            write_tsv(tmp / name, header, rows)
        checks = {name: _sha256(tmp / name) for name in sorted(tables)}
        out_dir.mkdir(parents=True, exist_ok=True)
        for name in sorted(tables):
            os.replace(tmp / name, out_dir / name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    timings["total"] = timings["ingest"] + timings["method"]
    manifest = {
        "method": cfg["method"],
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "versions": {"regimes": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "outputs": checks,
        "timings_seconds": timings,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def build_parser():
    ap = argparse.ArgumentParser(prog="regimes", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="method", required=True)
    for m in METHODS:
        sp = sub.add_parser(m)
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--threads", type=int, default=None, help="worker threads")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = materialize(args.method, raw, path.parent, args.seed, args.threads)
        run(cfg, args.out)
    except (ConfigError, IngestError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
