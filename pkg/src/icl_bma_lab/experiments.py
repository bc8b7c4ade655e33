"""Experiment drivers behind the command-line runner.

Each driver takes a plain config dict (already schema-validated), a root
seed, and a thread count, and returns ``(payload, curves)`` where ``payload``
is a JSON-ready dict and ``curves`` maps csv-file stems to (header, rows).
Seeds fan out through ``numpy.random.SeedSequence`` spawning so results are
reproducible and mergeable in a deterministic order.
"""

from __future__ import annotations

import math

import numpy as np

from . import bma, concept_model as cm, kernel_attention as ka
from . import metrics, robustness as rb, transformer as tr

__all__ = [
    "SureInequalityError",
    "run_gen_model",
    "run_bma_regret",
    "run_attn_converge",
    "run_pretrain",
    "run_eval_tv",
    "run_depth_sweep",
    "run_robustness",
    "run_regret_decomp",
    "run_check_lemmas",
]


class SureInequalityError(AssertionError):
    """A surely-true inequality failed: indicates an implementation bug."""


def _rng(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def _load_or_build_model(config: dict):
    if "model_file" in config:
        return cm.load_model(config["model_file"])
    return cm.model_from_recipe(config["model"])


def run_gen_model(config: dict, seed: int, out_dir, threads: int = 1):
    recipe = dict(config["recipe"])
    recipe.setdefault("seed", seed)
    model = cm.model_from_recipe(recipe)
    path = out_dir / config.get("filename", "model.json")
    cm.save_model(model, path)
    report = cm.validate_assumptions(model)
    payload = {"model_file": path.name, "recipe": recipe,
               "assumptions": report.to_dict()}
    return payload, {}


def run_bma_regret(config: dict, seed: int, out_dir=None, threads: int = 1):
    """Regret curves of the BMA oracle across seeded trajectories and models.

    Asserts the sure regret bound at every step; a violation raises
    :class:`SureInequalityError`.
    """
    horizon = int(config.get("horizon", 500))
    n_models = int(config.get("n_models", 1))
    n_traj = int(config.get("trajectories_per_model", 10))
    curves = {}
    worst_gap = -math.inf
    violations = 0
    per_model = []
    for mi in range(n_models):
        if "model_file" in config and n_models == 1:
            model = cm.load_model(config["model_file"])
        else:
            recipe = dict(config["model"])
            recipe["seed"] = int(_rng(seed, 0, mi).integers(2 ** 31))
            model = cm.model_from_recipe(recipe)
        max_regret = -math.inf
        for ti in range(n_traj):
            rng = _rng(seed, 1, mi, ti)
            z = cm.sample_concept(model, rng)
            seq = cm.generate_sequence(model, z, horizon, rng)
            curve = bma.bma_regret_curve(model, seq)
            gap = float(np.max(curve.regret - curve.bound))
            worst_gap = max(worst_gap, gap)
            violations += int(np.sum(curve.regret > curve.bound + 1e-9))
            max_regret = max(max_regret, float(curve.regret.max()))
            if mi == 0 and ti == 0:
                curves["regret_curve"] = (
                    ["t", "regret", "bound", "cum_loglik_bma", "cum_loglik_best_z"],
                    list(curve.rows()))
        per_model.append({"model_index": mi, "max_regret": max_regret})
    if violations:
        raise SureInequalityError(
            f"regret bound violated {violations} times (worst gap {worst_gap:.3e})")
    payload = {"horizon": horizon, "n_models": n_models,
               "trajectories_per_model": n_traj, "violations": 0,
               "worst_gap": worst_gap, "per_model": per_model}
    return payload, curves


def run_attn_converge(config: dict, seed: int, out_dir=None, threads: int = 1):
    curve = ka.convergence_experiment(
        config.get("t_grid", [16, 64, 256, 1024, 4096]),
        d_k=int(config.get("d_k", 8)), d_v=int(config.get("d_v", 8)),
        trials=int(config.get("trials", 64)), rng=_rng(seed, 0),
        gamma=float(config.get("gamma", 1.0)),
        lambda_exponent=float(config.get("lambda_exponent", 0.75)),
        threads=threads)
    e = curve.mean_distance
    payload = {
        "t_grid": curve.T.tolist(), "mean_distance": e.tolist(),
        "stderr": curve.stderr.tolist(), "fitted_c_mean": curve.fitted_c_mean.tolist(),
        "strictly_decreasing": bool(np.all(np.diff(e) < 0)),
        "last_vs_first_ratio": float(e[-1] / e[0]),
        "n_resampled": curve.n_resampled,
    }
    curves = {"attn_convergence": (
        ["T", "mean_distance", "stderr", "fitted_C_mean"], list(curve.rows()))}
    return payload, curves


def _train_config(config: dict, seed: int, d_y: int) -> tr.TrainConfig:
    t = config.get("train", {})
    bounds = tr.Bounds.from_dict(t["bounds"]) if "bounds" in t else tr.Bounds()
    return tr.TrainConfig(
        d=int(t.get("d", 16)), depth=int(t.get("depth", 1)),
        heads=int(t.get("heads", 2)), d_ff=int(t.get("d_ff", 32)),
        d_y=d_y, tau=float(t.get("tau", 1.0)), bounds=bounds,
        steps=int(t.get("steps", 600)),
        learning_rate=float(t.get("learning_rate", 0.02)),
        mode=t.get("mode", "adam"),
        batch_size=t.get("batch_size", 512),
        seed=seed, init_scale=float(t.get("init_scale", 0.25)))


def run_pretrain(config: dict, seed: int, out_dir=None, threads: int = 1):
    """Single training run; writes a checkpoint and the loss trace."""
    model = _load_or_build_model(config)
    cfg = _train_config(config, seed, d_y=model.alphabet_size)
    emb_rng = _rng(seed, 10)
    embedding = tr.make_embedding(model.alphabet_size, cfg.d, emb_rng,
                                  max_norm=float(config.get("embed_norm", 1.0)))
    seq_len = int(config.get("seq_len", 16))
    n_traj = int(config.get("n_traj", 64))
    ds = tr.build_mle_dataset(model, embedding, n_traj, seq_len, _rng(seed, 11))
    objective = config.get("objective", "mle")
    if objective == "l2":
        targets = np.zeros((ds.n, cfg.d))
        eye = np.eye(model.alphabet_size)
        targets[:, :model.alphabet_size] = eye[ds.targets]
        ds = tr.PretrainDataset(inputs=ds.inputs, lengths=ds.lengths,
                                kind="vectors", targets=targets, meta=ds.meta)
        cfg.d_y = cfg.d
        result = tr.train_l2(ds, cfg)
    else:
        result = tr.train_mle(ds, cfg)
    rep = tr.evaluate_tv(result.params, embedding, model,
                         n_prefixes=int(config.get("eval_prefixes", 256)),
                         horizon=seq_len, rng=_rng(seed, 12)) \
        if objective == "mle" else None
    if out_dir is not None:
        tr.save_checkpoint(result.params, out_dir / "checkpoint.bin",
                           extra={"seed": seed, "objective": objective})
    payload = {
        "objective": objective, "n_traj": n_traj, "seq_len": seq_len,
        "final_loss": result.final_loss,
        "initial_loss": result.trace[0][1],
        "mean_tv": None if rep is None else rep.mean_tv,
        "mean_kl": None if rep is None else rep.mean_kl,
    }
    curves = {"loss_trace": (
        ["step", "loss", "grad_norm", "projected_blocks_count"],
        [(int(s), float(l), float(g), int(p)) for s, l, g, p in result.trace])}
    return payload, curves


def run_eval_tv(config: dict, seed: int, out_dir=None, threads: int = 1):
    """Pretraining-size grid: median TV of the trained net per token budget."""
    model = _load_or_build_model(config)
    seq_len = int(config.get("seq_len", 16))
    grid = [int(n) for n in config.get("n_traj_grid", [32, 128, 512])]
    n_seeds = int(config.get("train_seeds", 5))
    eval_prefixes = int(config.get("eval_prefixes", 400))
    cells = []
    rows = []
    for ci, n_traj in enumerate(grid):
        tvs, kls = [], []
        for si in range(n_seeds):
            sub = int(_rng(seed, 20, ci, si).integers(2 ** 31))
            cfg = _train_config(config, sub, d_y=model.alphabet_size)
            embedding = tr.make_embedding(model.alphabet_size, cfg.d, _rng(seed, 10))
            ds = tr.build_mle_dataset(model, embedding, n_traj, seq_len,
                                      _rng(seed, 21, ci, si))
            result = tr.train_mle(ds, cfg)
            rep = tr.evaluate_tv(result.params, embedding, model, eval_prefixes,
                                 seq_len, _rng(seed, 22, ci, si))
            tvs.append(rep.mean_tv)
            kls.append(rep.mean_kl)
        tvs = np.array(tvs)
        stderr = float(tvs.std(ddof=1) / math.sqrt(n_seeds)) if n_seeds > 1 else 0.0
        cells.append({"n_traj": n_traj, "tokens": n_traj * seq_len,
                      "median_tv": float(np.median(tvs)),
                      "mean_tv": float(tvs.mean()), "stderr_tv": stderr,
                      "mean_kl": float(np.mean(kls)), "per_seed_tv": tvs.tolist()})
        rows.append((n_traj * seq_len, n_traj, seq_len, float(np.median(tvs)),
                     stderr, float(np.mean(kls))))
    medians = [c["median_tv"] for c in cells]
    errs = [c["stderr_tv"] for c in cells]
    monotone = all(medians[i + 1] <= medians[i] + errs[i]
                   for i in range(len(cells) - 1))
    payload = {"cells": cells, "monotone_within_stderr": monotone}
    curves = {"tv_grid": (
        ["tokens", "n_traj", "seq_len", "median_tv", "stderr", "mean_kl"], rows)}
    return payload, curves


def _smooth_target_dataset(embedding: tr.TokenEmbeddingTable, alphabet: int,
                           n_inputs: int, seq_len: int, d_y: int,
                           rng: np.random.Generator) -> tr.PretrainDataset:
    """Soft-target dataset from a fixed smooth bag-of-tokens map.

    Target law = softmax(W sin(V m + b)) of the mean embedded row m: a smooth
    permutation-invariant function of the sequence, the shape this
    architecture is built to express.
    """
    d = embedding.d
    v = rng.standard_normal((d, d_y)) * 1.5
    bias = rng.uniform(-1, 1, d_y) * 2.0
    w = rng.standard_normal((d_y, d_y))
    inputs = np.zeros((n_inputs, seq_len, d))
    lengths = np.full(n_inputs, seq_len, dtype=np.int64)
    targets = np.empty((n_inputs, d_y))
    for i in range(n_inputs):
        tokens = rng.integers(0, alphabet, size=seq_len)
        emb = embedding.embed(tokens)
        inputs[i] = emb
        feats = np.sin(emb.mean(axis=0) @ v + bias)
        logits = feats @ w.T
        e = np.exp(logits - logits.max())
        targets[i] = e / e.sum()
    return tr.PretrainDataset(inputs=inputs, lengths=lengths, kind="soft",
                              targets=targets, meta={"kind": "smooth-target"})


def run_depth_sweep(config: dict, seed: int, out_dir=None, threads: int = 1):
    """Best-of-k final KL to a fixed smooth target, across network depths."""
    alphabet = int(config.get("alphabet_size", 4))
    d_y = int(config.get("d_y", alphabet))
    depths = [int(d) for d in config.get("depths", [1, 2, 3, 4])]
    restarts = int(config.get("restarts", 3))
    seq_len = int(config.get("seq_len", 8))
    n_inputs = int(config.get("n_inputs", 256))
    base_cfg = _train_config(config, seed, d_y=d_y)
    embedding = tr.make_embedding(alphabet, base_cfg.d, _rng(seed, 30))
    dataset = _smooth_target_dataset(embedding, alphabet, n_inputs, seq_len,
                                     d_y, _rng(seed, 31))
    rows, cells = [], []
    for depth in depths:
        finals = []
        for r in range(restarts):
            cfg = _train_config(config, int(_rng(seed, 32, depth, r).integers(2 ** 31)),
                                d_y=d_y)
            cfg.depth = depth
            result = tr.train_mle(dataset, cfg)
            finals.append(result.final_loss)  # mean KL(target || net)
        best = float(min(finals))
        cells.append({"depth": depth, "best_kl": best, "restart_kls": finals})
        rows.append((depth, best))
    kls = [c["best_kl"] for c in cells]
    payload = {"cells": cells,
               "non_increasing": all(kls[i + 1] <= kls[i] + 1e-12
                                     for i in range(len(kls) - 1))}
    return payload, {"depth_sweep": (["depth", "best_kl"], rows)}


def run_robustness(config: dict, seed: int, out_dir=None, threads: int = 1):
    model = _load_or_build_model(config)
    if not isinstance(model, cm.PairConceptModel):
        raise ValueError("robustness experiments need an example-pair model")
    pol = config.get("policy", {})
    mapping = pol.get("mapping")
    policy = rb.PerturbationPolicy(kind=pol.get("kind", "flip_uniform"),
                                   rho=float(pol.get("rho", 0.0)),
                                   mapping=None if mapping is None else np.array(mapping))
    z_star = int(config.get("z_star", 0))
    t_grid = [int(t) for t in config.get("t_grid", [25, 49, 100, 196, 400])]
    trials = int(config.get("trials", 400))
    predictor = rb.bma_pair_predictor(model)
    curve = rb.robustness_curve(predictor, model, z_star, policy, t_grid,
                                trials, _rng(seed, 40))
    log_kl = np.log(np.maximum(curve.mean_kl, 1e-300))
    sqrt_t = np.sqrt(curve.t.astype(float))
    slope = float(np.polyfit(sqrt_t, log_kl, 1)[0])
    payload = {
        "z_star": z_star, "policy": {"kind": policy.kind, "rho": policy.rho},
        "margin": curve.margin, "c0": curve.c0, "l": curve.l,
        "t_grid": curve.t.tolist(), "mean_kl": curve.mean_kl.tolist(),
        "stderr": curve.stderr.tolist(),
        "log_kl_vs_sqrt_t_slope": slope,
        "n_flagged": curve.n_flagged.tolist(),
    }
    curves = {"robustness_curve": (
        ["t", "mean_kl", "stderr", "margin", "c0", "l", "envelope_value"],
        list(curve.rows()))}
    return payload, curves


def run_regret_decomp(config: dict, seed: int, out_dir=None, threads: int = 1):
    pre_model = _load_or_build_model(config)
    if "icl_model_file" in config:
        icl_model = cm.load_model(config["icl_model_file"])
    elif "icl_model" in config:
        icl_model = cm.model_from_recipe(config["icl_model"])
    else:
        icl_model = pre_model
    horizon = int(config.get("horizon", 100))
    trials = int(config.get("trials", 50))
    if "checkpoint" in config:
        params, _ = tr.load_checkpoint(config["checkpoint"])
        embedding = tr.make_embedding(pre_model.alphabet_size, params.d, _rng(seed, 10))
        predictor = tr.TransformerPredictor(params, embedding)
        predictor_kind = "checkpoint"
    elif config.get("predictor", "bma") == "bma":
        predictor = bma.bma_predictor(pre_model)
        predictor_kind = "bma-oracle"
    else:
        cfg = _train_config(config, seed, d_y=pre_model.alphabet_size)
        embedding = tr.make_embedding(pre_model.alphabet_size, cfg.d, _rng(seed, 10))
        ds = tr.build_mle_dataset(pre_model, embedding,
                                  int(config.get("n_traj", 64)),
                                  int(config.get("seq_len", 16)), _rng(seed, 11))
        result = tr.train_mle(ds, cfg)
        predictor = tr.TransformerPredictor(result.params, embedding)
        predictor_kind = "trained"
    report = rb.pretrained_regret_decomposition(
        predictor, pre_model, icl_model, horizon, trials, _rng(seed, 41),
        beta=config.get("beta"), kappa=config.get("kappa"))
    if report.max_identity_err > 1e-9:
        raise SureInequalityError(
            f"decomposition identity broke: max err {report.max_identity_err:.3e}")
    payload = {"predictor": predictor_kind, "horizon": horizon,
               "trials": trials, **report.to_dict()}
    rows = [(i, r.total, r.oracle_term, r.logratio_term, r.identity_err,
             int(r.coverage_ok), r.z_star)
            for i, r in enumerate(report.trajectories)]
    curves = {"regret_decomposition": (
        ["trial", "total", "oracle_term", "logratio_term", "identity_err",
         "coverage_ok", "z_star"], rows)}
    return payload, curves


def run_check_lemmas(config: dict, seed: int, out_dir=None, threads: int = 1):
    """Numeric spot checks: TV-KL lemma, sphere integral, fluctuation bound."""
    rng = _rng(seed, 50)
    n_pairs = int(config.get("tv_kl_pairs", 10_000))
    failures = 0
    for _ in range(n_pairs):
        k = int(rng.integers(2, 17))
        p = rng.dirichlet(np.ones(k))
        q = rng.dirichlet(np.ones(k)) + 1e-9
        q = q / q.sum()
        if not metrics.tv_kl_lemma_check(p, q).holds:
            failures += 1
    if failures:
        raise SureInequalityError(f"TV-KL lemma failed on {failures} pairs")

    sphere = []
    for d in config.get("sphere_dims", [2, 8]):
        rep = ka.sphere_integral_check(
            np.eye(int(d))[0], int(d), gamma=float(config.get("gamma", 1.0)),
            n_samples=int(config.get("sphere_samples", 1_000_000)),
            rng=_rng(seed, 51, int(d)))
        sphere.append({"d": int(d), "cosine": rep.cosine, "c1": rep.c1,
                       "orthogonal_fraction": rep.orthogonal_fraction})

    n_pert = int(config.get("fluctuation_pairs", 20))
    n_inputs = int(config.get("fluctuation_inputs", 5))
    viol = 0
    worst_ratio = 0.0
    prng = _rng(seed, 52)
    for _ in range(n_pert):
        p1 = tr.random_params(8, 2, 2, 16, 4, prng)
        scale = float(prng.uniform(1e-4, 1e-2))
        p2 = tr.project_params(p1.replace_tensors(
            [t + scale * _torch_randn_like(t, prng) for t in p1.tensors()]))
        bound = tr.parafluc_bound(p1, p2, input_norm_r=1.0)
        for _ in range(n_inputs):
            x = prng.standard_normal((6, 8))
            x /= np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1.0)
            observed = metrics.tv(tr.forward(p1, x), tr.forward(p2, x))
            worst_ratio = max(worst_ratio, observed / bound if bound > 0 else 0.0)
            if observed > bound + 1e-12:
                viol += 1
    if viol:
        raise SureInequalityError(f"fluctuation bound violated {viol} times")
    payload = {"tv_kl_pairs": n_pairs, "tv_kl_failures": 0,
               "sphere": sphere, "fluctuation_pairs": n_pert,
               "fluctuation_violations": 0,
               "fluctuation_worst_ratio": worst_ratio}
    return payload, {}


def _torch_randn_like(t, rng: np.random.Generator):
    import torch
    return torch.from_numpy(rng.standard_normal(tuple(t.shape)))
