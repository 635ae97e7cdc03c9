"""Joint-distribution (successive-conditional) testing of the sampler.

The marginal-conditional sample draws states directly from the prior. The
successive-conditional chain alternates a data draw y ~ p(y | state) with one
full Gibbs sweep targeting p(state | y). If the transition kernel is correct,
both samples share every marginal, so standardized differences of test
function means should look like noise; |z| beyond ~4 flags a broken update.
"""

from __future__ import annotations

import numpy as np

from .inference import GibbsSampler
from .seeding import substream


def default_test_functions(sampler: GibbsSampler):
    """Ten scalar functions of the state covering every parameter block."""
    entries = sampler.entries
    funcs = []

    def entry_fn(e):
        return lambda s: s.A[e]

    for e in entries[:3]:
        funcs.append((f"A_{e[0] + 1}_{e[1] + 1}", entry_fn(e)))
    e0 = entries[0]
    funcs.append((f"A_{e0[0] + 1}_{e0[1] + 1}_sq", lambda s: s.A[e0] ** 2))
    funcs.append(("log_tau2_1", lambda s: np.log(s.tau2[0])))
    funcs.append(("inv_tau2_last", lambda s: 1.0 / s.tau2[-1]))
    m0 = int(np.flatnonzero(sampler.overall_active)[0])
    funcs.append(("beta_first_t0", lambda s: s.beta[0, m0]))
    funcs.append(("beta_first_t0_sq", lambda s: s.beta[0, m0] ** 2))
    k0 = int(sampler.coreg_active[0])
    funcs.append(("w_mean_t0", lambda s: float(np.mean(s.w[0, k0]))))
    funcs.append(("w_sq_site0_t0", lambda s: float(s.w[0, k0, 0] ** 2)))
    return funcs[:10]


def _batch_se(x: np.ndarray, n_batches: int = 40) -> float:
    """Batch-means standard error for a correlated scalar chain."""
    n = len(x)
    b = max(n // n_batches, 2)
    m = n // b
    means = x[: m * b].reshape(m, b).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(m))

def geweke_test(
    dataset,
    spec,
    n_transitions: int = 50000,
    n_marginal: int = 20000,
    seed: int = 0,
    test_functions=None,
    thin: int = 1,
    adapt_transitions: int = 1000,
):
    """Run both Geweke samples and return per-function z-scores.

    The dataset supplies the design (sites, days, reporting pattern,
    covariates); its observed values are irrelevant because the data step
    redraws them each transition. Step-size adaptation runs for
    ``adapt_transitions`` discarded transitions and is then frozen, so the
    collected segment uses an exact Markov kernel.
    """
    sampler = GibbsSampler(dataset, spec)
    if test_functions is None:
        test_functions = default_test_functions(sampler)
    names = [n for n, _ in test_functions]

    rng_m = substream(seed, "geweke", "marginal")
    marg = np.empty((n_marginal, len(test_functions)))
    for i in range(n_marginal):
        sampler.prior_draw(rng_m)
        marg[i] = [f(sampler) for _, f in test_functions]

    rng_s = substream(seed, "geweke", "successive")
    sampler.prior_draw(rng_s)
    for _ in range(adapt_transitions):
        sampler.draw_data(rng_s)
        sampler.sweep(rng_s)
    sampler.freeze_adaptation()
    succ = np.empty((n_transitions // thin + 1, len(test_functions)))
    kept = 0
    for i in range(n_transitions):
        sampler.draw_data(rng_s)
        sampler.sweep(rng_s)
        if i % thin == 0:
            succ[kept] = [f(sampler) for _, f in test_functions]
            kept += 1
    succ = succ[:kept]

    out = {}
    for j, name in enumerate(names):
        se_m = marg[:, j].std(ddof=1) / np.sqrt(n_marginal)
        se_s = _batch_se(succ[:, j])
        z = (marg[:, j].mean() - succ[:, j].mean()) / np.sqrt(se_m**2 + se_s**2)
        out[name] = {
            "z": float(z),
            "marginal_mean": float(marg[:, j].mean()),
            "successive_mean": float(succ[:, j].mean()),
        }
    return out
