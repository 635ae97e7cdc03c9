"""MCMC fitting of a ModelSpec on an AlignedDataset.

Sampler layout (one sweep):

  1. latent fields w_k, day by day, through the four-step misalignment
     schedule: sites reporting both pollutants, then pollutant-1-only sites,
     then pollutant-2-only sites (each from its exact Gaussian full
     conditional given the likelihood terms it owns), and finally the
     non-reporting sites from the GP conditional with no likelihood term;
  2. overall coefficients: exact Gibbs per day (independent-across-time),
     pooled (static), or a joint forward-filter backward-sample pass
     (dynamic);
  3. unmasked coregionalization entries by adaptive random-walk Metropolis
     (diagonal entries walk on the log scale), adaptation frozen when
     burn-in ends;
  4. nugget variances by their conjugate inverse-gamma conditionals.

Days are conditionally independent under independent-replicate local fields,
so the per-day latent updates are batched across days that share a reporting
pattern. Everything is deterministic given (dataset, spec, seed).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .covariance import (
    LATENT_RIDGE,
    Coregionalization,
    VariantPattern,
    coef_index,
    distance_matrix,
    variant_mask,
)
from .data import AlignedDataset
from .errors import (
    InsufficientDraws,
    NonFiniteLikelihood,
    NonStationary,
    NotPositiveDefinite,
)
from .model import LocalTime, ModelSpec, OverallTime, validate_spec
from .seeding import substream

TAU2_FLOOR = 1e-10
_ADAPT_BATCH = 50
_ADAPT_TARGET = 0.375  # middle of the 0.30-0.45 acceptance window


def _chol_psd(m, ridge=LATENT_RIDGE):
    try:
        return np.linalg.cholesky(m + ridge * np.eye(m.shape[-1]))
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("latent covariance block failed Cholesky") from None


def _inv_psd(m, ridge=LATENT_RIDGE):
    L = _chol_psd(m, ridge)
    inv = cho_solve((L, True), np.eye(m.shape[-1]))
    return 0.5 * (inv + inv.T)


@dataclass
class _PollutantObs:
    """Flat per-pollutant observation arrays on the transformed scale."""

    t: np.ndarray      # day positions (N,)
    s: np.ndarray      # site indices (N,)
    y: np.ndarray      # transformed values (N,)
    X: np.ndarray      # design rows (N, p+1): 1, x_1(B,t), ..., x_p(B,t)


@dataclass
class _Block:
    idx: np.ndarray      # site indices in the block
    rest: np.ndarray     # complementary site indices
    W: np.ndarray        # R_br R_rr^-1, (n_b, n_r)
    S_inv: np.ndarray    # inverse conditional prior covariance, (n_b, n_b)


class GibbsSampler:
    """One-chain sampler; `run_chain` is the public entry point."""

    def __init__(self, dataset: AlignedDataset, spec: ModelSpec):
        problems = validate_spec(spec)
        if problems:
            raise ValueError("invalid spec: " + "; ".join(problems))
        if spec.transform is not None and spec.transform != dataset.transform:
            raise ValueError("spec and dataset disagree on the transform")
        self.dataset = dataset
        self.spec = spec
        self.p = spec.p
        self.q = spec.q
        self.mask = spec.mask()
        self.entries = list(zip(*np.nonzero(self.mask)))
        self.overall_active = spec.overall_active()
        self.coreg_active = np.flatnonzero(self.mask.any(axis=0))

        self.site_ids = dataset.site_ids()
        self.site_index = {sid: i for i, sid in enumerate(self.site_ids)}
        self.n_s = len(self.site_ids)
        self.days = list(dataset.days) if dataset.days else [0]
        self.day_pos = {t: i for i, t in enumerate(self.days)}
        self.T = len(self.days)

        self.block_cols = [
            np.array([coef_index(i, j, self.p) for j in range(self.p + 1)])
            for i in range(self.p)
        ]
        self._prepare_observations()
        self._prepare_latent_caches()

        # Parameter state.
        self.A = np.zeros((self.q, self.q))
        for r, c in self.entries:
            if r == c:
                self.A[r, c] = 1.0
        self.tau2 = np.ones(self.p)
        self.beta = np.zeros((self.T, self.q))
        self.beta0 = np.zeros(self.q)  # dynamic pre-sample state
        self.w = np.zeros((self.T, self.q, self.n_s))
        self.xi2 = np.ones(self.q)
        self.rho = spec.temporal.rho_vector(self.q)
        self.gamma = spec.temporal.gamma_vector(self.q)
        if spec.temporal.overall is OverallTime.DYNAMIC and np.any(np.abs(self.rho) >= 1.0):
            raise NonStationary("dynamic overall requires |rho| < 1")

        self.step_sizes = {e: 0.1 for e in self.entries}
        self._acc = {e: 0 for e in self.entries}
        self._prop = {e: 0 for e in self.entries}
        self._batch_acc = {e: 0 for e in self.entries}
        self._batch_prop = {e: 0 for e in self.entries}
        self._adapting = True
        self.beta_local = np.zeros((self.T, self.q, self.n_s))

    # ------------------------------------------------------------------ setup

    def _prepare_observations(self):
        ds = self.dataset
        per = [[] for _ in range(self.p)]
        for o in ds.observations:
            per[o.pollutant - 1].append(o)
        self.obs: list[_PollutantObs] = []
        for i in range(self.p):
            recs = per[i]
            t = np.array([self.day_pos[o.t] for o in recs], dtype=int)
            s = np.array([self.site_index[o.site_id] for o in recs], dtype=int)
            y = np.array([ds.transformed_value(o) for o in recs], dtype=float)
            X = np.empty((len(recs), self.p + 1))
            for r, o in enumerate(recs):
                cell = ds.site_to_cell[o.site_id]
                X[r, 0] = 1.0
                X[r, 1:] = ds.covariates(cell, o.t)
            self.obs.append(_PollutantObs(t, s, y, X))

        # Per (pollutant, day) X'X for the overall-coefficient updates.
        self.XtX = np.zeros((self.p, self.T, self.p + 1, self.p + 1))
        for i in range(self.p):
            ob = self.obs[i]
            if len(ob.t):
                outer = ob.X[:, :, None] * ob.X[:, None, :]
                np.add.at(self.XtX[i], ob.t, outer)

    def _reporting_sets(self):
        """Per day position: per-site observed-pollutant sets."""
        per_day = [dict() for _ in range(self.T)]
        for i in range(self.p):
            ob = self.obs[i]
            for t, s in zip(ob.t, ob.s):
                per_day[t].setdefault(s, set()).add(i)
        return per_day

    def _day_signature(self, reported: dict) -> tuple:
        """Ordered Gibbs blocks for one day: full reporters first, then
        partial groups (pollutant-1-only before pollutant-2-only), then the
        non-reporting sites."""
        groups: dict[frozenset, list] = {}
        for s, polls in reported.items():
            groups.setdefault(frozenset(polls), []).append(s)
        ordered = sorted(groups.items(), key=lambda kv: (-len(kv[0]), sorted(kv[0])))
        blocks = [tuple(sorted(sites)) for _, sites in ordered]
        rest = tuple(sorted(set(range(self.n_s)) - set(reported)))
        if rest:
            blocks.append(rest)
        return tuple(blocks)

    def _prepare_latent_caches(self):
        d = distance_matrix(self.dataset.sites)
        self.R = {k: np.exp(-self.spec.phi.phi[k] * d) for k in self.coreg_active}
        self.R_inv = {k: _inv_psd(self.R[k]) for k in self.coreg_active}

        local = self.spec.temporal.local
        per_day = self._reporting_sets()
        if local is LocalTime.STATIC:
            merged: dict[int, set] = {}
            for day in per_day:
                for s, polls in day.items():
                    merged.setdefault(s, set()).update(polls)
            self.signatures = [self._day_signature(merged)]
            self.pattern_days = {self.signatures[0]: np.arange(self.T)}
        else:
            self.signatures = [self._day_signature(day) for day in per_day]
            self.pattern_days = {}
            for tpos, sig in enumerate(self.signatures):
                self.pattern_days.setdefault(sig, []).append(tpos)
            self.pattern_days = {
                sig: np.asarray(tps, dtype=int) for sig, tps in self.pattern_days.items()
            }

        self._block_cache: dict = {}

    def _blocks_for(self, k: int, sig: tuple) -> list[_Block]:
        key = (k, sig)
        if key in self._block_cache:
            return self._block_cache[key]
        R = self.R[k]
        blocks = []
        for idx_t in sig:
            idx = np.asarray(idx_t, dtype=int)
            rest = np.asarray(sorted(set(range(self.n_s)) - set(idx_t)), dtype=int)
            if rest.size:
                c = cho_factor(
                    R[np.ix_(rest, rest)] + LATENT_RIDGE * np.eye(rest.size), lower=True
                )
                W = cho_solve(c, R[np.ix_(rest, idx)]).T
                S = R[np.ix_(idx, idx)] - W @ R[np.ix_(rest, idx)]
            else:
                W = np.zeros((idx.size, 0))
                S = R[np.ix_(idx, idx)]
            blocks.append(_Block(idx=idx, rest=rest, W=W, S_inv=_inv_psd(S)))
        self._block_cache[key] = blocks
        return blocks

    # ------------------------------------------------------------ state views

    def _refresh_beta_local(self):
        self.beta_local = np.einsum("mk,tkn->tmn", self.A, self.w)
        if self.spec.temporal.local is LocalTime.DYNAMIC:
            for t in range(1, self.T):
                self.beta_local[t] += self.gamma[:, None] * self.beta_local[t - 1]

    def _mean(self, i: int) -> np.ndarray:
        ob = self.obs[i]
        if not len(ob.t):
            return np.zeros(0)
        cols = self.block_cols[i]
        total = self.beta[ob.t][:, cols] + self.beta_local[
            ob.t[:, None], cols[None, :], ob.s[:, None]
        ]
        return np.einsum("nj,nj->n", ob.X, total)

    def _local_part(self, i: int) -> np.ndarray:
        ob = self.obs[i]
        if not len(ob.t):
            return np.zeros(0)
        cols = self.block_cols[i]
        lp = self.beta_local[ob.t[:, None], cols[None, :], ob.s[:, None]]
        return np.einsum("nj,nj->n", ob.X, lp)

    # -------------------------------------------------------- latent w update

    def _likelihood_terms(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-(day, site) Gaussian pseudo-observation of w_k: precision and
        precision-weighted residual, summed over pollutants."""
        prec = np.zeros(self.T * self.n_s)
        shift = np.zeros(self.T * self.n_s)
        for i in range(self.p):
            ob = self.obs[i]
            if not len(ob.t):
                continue
            a_col = self.A[self.block_cols[i], k]
            if not np.any(a_col):
                continue
            g = ob.X @ a_col
            r = ob.y - self._mean(i) + g * self.w[ob.t, k, ob.s]
            flat = ob.t * self.n_s + ob.s
            np.add.at(prec, flat, g * g / self.tau2[i])
            np.add.at(shift, flat, g * r / self.tau2[i])
        return prec.reshape(self.T, self.n_s), shift.reshape(self.T, self.n_s)

    def _draw_blocks(self, k, blocks, tdays, prec, shift, rng):
        """Sequential block updates, batched over the days in tdays."""
        for blk in blocks:
            nb = blk.idx.size
            if nb == 0:
                continue
            if blk.rest.size:
                mu_c = self.w[np.ix_(tdays, [k], blk.rest)][:, 0, :] @ blk.W.T
            else:
                mu_c = np.zeros((tdays.size, nb))
            Q = np.broadcast_to(blk.S_inv, (tdays.size, nb, nb)).copy()
            diag = np.arange(nb)
            Q[:, diag, diag] += prec[np.ix_(tdays, blk.idx)]
            rhs = mu_c @ blk.S_inv + shift[np.ix_(tdays, blk.idx)]
            try:
                C = np.linalg.inv(Q)
                C = 0.5 * (C + np.transpose(C, (0, 2, 1)))
                L = np.linalg.cholesky(C + LATENT_RIDGE * np.eye(nb))
            except np.linalg.LinAlgError:
                raise NotPositiveDefinite("posterior block covariance not PD") from None
            mean = np.einsum("tab,tb->ta", C, rhs)
            z = rng.standard_normal((tdays.size, nb))
            self.w[np.ix_(tdays, [k], blk.idx)] = (
                mean + np.einsum("tab,tb->ta", L, z)
            )[:, None, :]

    def update_latent_w(self, t, rng):
        """Four-step misalignment update of every active process for day t.

        Step order: both-reporting sites, pollutant-1-only, pollutant-2-only
        (each conditioning only on its own likelihood contributions), then
        non-reporting sites from the prior GP conditional.
        """
        tpos = self.day_pos[t] if t in self.day_pos else int(t)
        if self.spec.temporal.local is LocalTime.DYNAMIC:
            self._update_w_dynamic(rng, only_day=tpos)
            return
        sig = self.signatures[0 if self.spec.temporal.local is LocalTime.STATIC else tpos]
        for k in self.coreg_active:
            self._refresh_beta_local()
            prec, shift = self._likelihood_terms(k)
            if self.spec.temporal.local is LocalTime.STATIC:
                prec = prec.sum(axis=0, keepdims=True)
                shift = shift.sum(axis=0, keepdims=True)
                self._draw_blocks(k, self._blocks_for(k, sig), np.array([0]), prec, shift, rng)
                self.w[:, k, :] = self.w[0, k, :]
            else:
                self._draw_blocks(
                    k, self._blocks_for(k, sig), np.array([tpos]), prec, shift, rng
                )
        self._refresh_beta_local()

    def _update_w(self, rng):
        if self.spec.temporal.local is LocalTime.DYNAMIC:
            self._update_w_dynamic(rng)
            return
        static = self.spec.temporal.local is LocalTime.STATIC
        for k in self.coreg_active:
            self._refresh_beta_local()
            prec, shift = self._likelihood_terms(k)
            if static:
                prec = prec.sum(axis=0, keepdims=True)
                shift = shift.sum(axis=0, keepdims=True)
                self._draw_blocks(
                    k, self._blocks_for(k, self.signatures[0]), np.array([0]), prec, shift, rng
                )
                self.w[:, k, :] = self.w[0, k, :]
            else:
                for sig, tdays in self.pattern_days.items():
                    self._draw_blocks(k, self._blocks_for(k, sig), tdays, prec, shift, rng)
        self._refresh_beta_local()

    def _update_w_dynamic(self, rng, only_day=None):
        """Dynamic local fields: each day's innovation field is one exact
        all-sites Gibbs block (likelihood terms accumulate over t >= u)."""
        days = range(self.T) if only_day is None else [only_day]
        for u in days:
            for k in self.coreg_active:
                self._refresh_beta_local()
                means = [self._mean(i) for i in range(self.p)]
                prec = np.zeros(self.n_s)
                shift = np.zeros(self.n_s)
                for i in range(self.p):
                    ob = self.obs[i]
                    if not len(ob.t):
                        continue
                    sel = ob.t >= u
                    if not np.any(sel):
                        continue
                    cols = self.block_cols[i]
                    gpow = self.gamma[cols][None, :] ** (ob.t[sel, None] - u)
                    gcol = np.einsum("nj,nj,j->n", ob.X[sel], gpow, self.A[cols, k])
                    r = ob.y[sel] - means[i][sel] + gcol * self.w[u, k, ob.s[sel]]
                    np.add.at(prec, ob.s[sel], gcol * gcol / self.tau2[i])
                    np.add.at(shift, ob.s[sel], gcol * r / self.tau2[i])
                Q = self.R_inv[k].copy()
                Q[np.arange(self.n_s), np.arange(self.n_s)] += prec
                C = _inv_psd(Q, ridge=0.0)
                mean = C @ shift
                self.w[u, k] = mean + _chol_psd(C) @ rng.standard_normal(self.n_s)
        self._refresh_beta_local()

    # ----------------------------------------------------- overall beta update

    def _beta_obs_information(self, i):
        """Per-day observation information for pollutant i's active coords."""
        ob = self.obs[i]
        cols = self.block_cols[i]
        act = self.overall_active[cols]
        r = ob.y - self._local_part(i)
        info = np.zeros((self.T, self.p + 1))
        if len(ob.t):
            np.add.at(info, ob.t, ob.X * r[:, None] / self.tau2[i])
        P = self.XtX[i] / self.tau2[i]
        return act, P[:, act][:, :, act], info[:, act]

    def _update_beta(self, rng):
        pr = self.spec.priors
        overall = self.spec.temporal.overall
        for i in range(self.p):
            cols = self.block_cols[i]
            act, P_obs, b_obs = self._beta_obs_information(i)
            n_act = int(act.sum())
            if n_act == 0:
                continue
            acols = cols[act]
            prior_prec = 1.0 / pr.beta_var
            prior_shift = pr.beta_mean / pr.beta_var
            if overall is OverallTime.STATIC:
                P = P_obs.sum(axis=0) + prior_prec * np.eye(n_act)
                b = b_obs.sum(axis=0) + prior_shift
                C = _inv_psd(P, ridge=0.0)
                draw = C @ b + _chol_psd(C, ridge=0.0) @ rng.standard_normal(n_act)
                self.beta[:, acols] = draw
            elif overall is OverallTime.INDEPENDENT_ACROSS_TIME:
                P = P_obs + prior_prec * np.eye(n_act)
                C = np.linalg.inv(P)
                C = 0.5 * (C + np.transpose(C, (0, 2, 1)))
                mean = np.einsum("tab,tb->ta", C, b_obs + prior_shift)
                L = np.linalg.cholesky(C)
                z = rng.standard_normal((self.T, n_act))
                self.beta[:, acols] = mean + np.einsum("tab,tb->ta", L, z)
            else:
                path = ffbs_gaussian(
                    rng,
                    m0=np.full(n_act, pr.beta0_mean),
                    v0=np.full(n_act, pr.beta0_var),
                    rho=self.rho[acols],
                    xi2=self.xi2[acols],
                    obs_prec=P_obs,
                    obs_info=b_obs,
                )
                self.beta0[acols] = path[0]
                self.beta[:, acols] = path[1:]
                # Conjugate innovation-variance update given the path.
                prev = np.vstack([path[0][None, :], path[1:-1]])
                resid = path[1:] - self.rho[acols][None, :] * prev
                sh = pr.xi2_shape + 0.5 * self.T
                sc = pr.xi2_scale + 0.5 * np.sum(resid**2, axis=0)
                self.xi2[acols] = np.maximum(sc / rng.gamma(sh, 1.0, size=n_act), TAU2_FLOOR)

    # ------------------------------------------------------------- A entries

    def _accumulated_w(self, k: int, m: int) -> np.ndarray:
        """w_k as seen by coefficient row m (gamma-accumulated when dynamic)."""
        if self.spec.temporal.local is not LocalTime.DYNAMIC:
            return self.w[:, k, :]
        g = self.gamma[m]
        acc = np.empty_like(self.w[:, k, :])
        acc[0] = self.w[0, k]
        for t in range(1, self.T):
            acc[t] = g * acc[t - 1] + self.w[t, k]
        return acc

    def _update_A(self, rng):
        pr = self.spec.priors
        means = [self._mean(i) for i in range(self.p)]
        for (m, k) in self.entries:
            i, j = divmod(m, self.p + 1)
            ob = self.obs[i]
            if len(ob.t):
                wk = self._accumulated_w(k, m)
                z = ob.X[:, j] * wk[ob.t, ob.s]
                a = self.A[m, k]
                r = ob.y - means[i] + a * z
                s_zz = np.sum(z * z) / self.tau2[i]
                s_rz = np.sum(r * z) / self.tau2[i]
            else:
                a, z = self.A[m, k], None
                s_zz = s_rz = 0.0
            if not np.isfinite(s_zz) or not np.isfinite(s_rz):
                raise NonFiniteLikelihood("non-finite quadratic terms in A update")
            step = self.step_sizes[(m, k)]
            if m == k:
                u = np.log(a)
                u_new = u + step * rng.standard_normal()
                a_new = np.exp(u_new)
                logp = -0.5 * ((u_new - pr.diagA_logmean) ** 2 - (u - pr.diagA_logmean) ** 2) / pr.diagA_logsd**2
            else:
                a_new = a + step * rng.standard_normal()
                logp = -0.5 * ((a_new - pr.offdiagA_mean) ** 2 - (a - pr.offdiagA_mean) ** 2) / pr.offdiagA_var
            loglik = -0.5 * (a_new**2 - a**2) * s_zz + (a_new - a) * s_rz
            self._prop[(m, k)] += 1
            self._batch_prop[(m, k)] += 1
            if np.log(rng.uniform()) < loglik + logp:
                self.A[m, k] = a_new
                if z is not None:
                    means[i] = means[i] + (a_new - a) * z
                self._acc[(m, k)] += 1
                self._batch_acc[(m, k)] += 1
            if self._adapting and self._batch_prop[(m, k)] >= _ADAPT_BATCH:
                rate = self._batch_acc[(m, k)] / self._batch_prop[(m, k)]
                factor = np.exp(np.clip(rate - _ADAPT_TARGET, -0.5, 0.5))
                self.step_sizes[(m, k)] = float(np.clip(step * factor, 1e-4, 50.0))
                self._batch_acc[(m, k)] = 0
                self._batch_prop[(m, k)] = 0
        self._refresh_beta_local()

    # ------------------------------------------------------------ tau2 update

    def _update_tau2(self, rng):
        pr = self.spec.priors
        for i in range(self.p):
            ob = self.obs[i]
            resid = ob.y - self._mean(i)
            shape = pr.nugget_shape + 0.5 * len(ob.y)
            scale = pr.nugget_scale + 0.5 * float(np.sum(resid**2))
            self.tau2[i] = max(scale / rng.gamma(shape, 1.0), TAU2_FLOOR)

    # ---------------------------------------------------------------- driving

    def sweep(self, rng):
        self._update_w(rng)
        self._update_beta(rng)
        self._update_A(rng)
        self._update_tau2(rng)

    def freeze_adaptation(self):
        self._adapting = False

    def acceptance_rates(self) -> dict:
        return {
            f"A_{m + 1}_{k + 1}": (self._acc[(m, k)] / self._prop[(m, k)] if self._prop[(m, k)] else 0.0)
            for (m, k) in self.entries
        }

    # -------------------------------------------------- Geweke support hooks

    def prior_draw(self, rng):
        """Replace the state with an exact draw from the prior."""
        pr = self.spec.priors
        for (m, k) in self.entries:
            if m == k:
                self.A[m, k] = np.exp(pr.diagA_logmean + pr.diagA_logsd * rng.standard_normal())
            else:
                self.A[m, k] = pr.offdiagA_mean + np.sqrt(pr.offdiagA_var) * rng.standard_normal()
        for i in range(self.p):
            self.tau2[i] = max(pr.nugget_scale / rng.gamma(pr.nugget_shape, 1.0), TAU2_FLOOR)
        overall = self.spec.temporal.overall
        act = self.overall_active
        self.beta[:] = 0.0
        if overall is OverallTime.DYNAMIC:
            self.xi2[act] = np.maximum(
                pr.xi2_scale / rng.gamma(pr.xi2_shape, 1.0, size=int(act.sum())), TAU2_FLOOR
            )
            self.beta0[act] = pr.beta0_mean + np.sqrt(pr.beta0_var) * rng.standard_normal(int(act.sum()))
            prev = self.beta0[act]
            for t in range(self.T):
                prev = self.rho[act] * prev + np.sqrt(self.xi2[act]) * rng.standard_normal(int(act.sum()))
                self.beta[t, act] = prev
        elif overall is OverallTime.STATIC:
            self.beta[:, act] = pr.beta_mean + np.sqrt(pr.beta_var) * rng.standard_normal(int(act.sum()))
        else:
            self.beta[:, act] = pr.beta_mean + np.sqrt(pr.beta_var) * rng.standard_normal(
                (self.T, int(act.sum()))
            )
        self.w[:] = 0.0
        for k in self.coreg_active:
            L = _chol_psd(self.R[k])
            if self.spec.temporal.local is LocalTime.STATIC:
                self.w[:, k, :] = L @ rng.standard_normal(self.n_s)
            else:
                for t in range(self.T):
                    self.w[t, k] = L @ rng.standard_normal(self.n_s)
        self._refresh_beta_local()

    def draw_data(self, rng):
        """Redraw every observation from the likelihood at the current state."""
        for i in range(self.p):
            ob = self.obs[i]
            ob.y = self._mean(i) + np.sqrt(self.tau2[i]) * rng.standard_normal(len(ob.y))


def ffbs_gaussian(rng, m0, v0, rho, xi2, obs_prec, obs_info):
    """Forward-filter backward-sample a diagonal-AR(1) Gaussian state path.

    State x_t = rho * x_{t-1} + N(0, diag(xi2)), t = 1..T, with
    x_0 ~ N(m0, diag(v0)). Day-t data enter through their Gaussian
    information (obs_prec[t], obs_info[t]). Returns the sampled path with
    the pre-sample state first, shape (T+1, n).
    """
    rho = np.asarray(rho, dtype=float)
    if np.any(np.abs(rho) >= 1.0):
        raise NonStationary("|rho| >= 1 in FFBS")
    obs_prec = np.asarray(obs_prec, dtype=float)
    obs_info = np.asarray(obs_info, dtype=float)
    T, n = obs_info.shape
    G = np.diag(rho)
    W = np.diag(np.asarray(xi2, dtype=float))

    ms = np.zeros((T + 1, n))
    Cs = np.zeros((T + 1, n, n))
    preds = np.zeros((T + 1, n))
    Rs = np.zeros((T + 1, n, n))
    ms[0] = np.asarray(m0, dtype=float)
    Cs[0] = np.diag(np.asarray(v0, dtype=float))
    for t in range(1, T + 1):
        preds[t] = rho * ms[t - 1]
        Rs[t] = G @ Cs[t - 1] @ G.T + W
        P = _inv_psd(Rs[t], ridge=0.0) + obs_prec[t - 1]
        Cs[t] = _inv_psd(P, ridge=0.0)
        ms[t] = Cs[t] @ (np.linalg.solve(Rs[t], preds[t]) + obs_info[t - 1])

    path = np.zeros((T + 1, n))
    path[T] = ms[T] + _chol_psd(Cs[T], ridge=0.0) @ rng.standard_normal(n)
    for t in range(T - 1, -1, -1):
        J = Cs[t] @ G.T @ _inv_psd(Rs[t + 1], ridge=0.0)
        mean = ms[t] + J @ (path[t + 1] - preds[t + 1])
        cov = Cs[t] - J @ Rs[t + 1] @ J.T
        cov = 0.5 * (cov + cov.T)
        path[t] = mean + _chol_psd(cov) @ rng.standard_normal(n)
    return path


def dynamic_ffbs(sampler: GibbsSampler, rng) -> np.ndarray:
    """Draw the overall-coefficient path jointly (dynamic structure only).

    Returns the sampled beta array (T, q); the sampler state is updated in
    place exactly as during a sweep.
    """
    if sampler.spec.temporal.overall is not OverallTime.DYNAMIC:
        raise ValueError("dynamic_ffbs requires a dynamic overall structure")
    sampler._update_beta(rng)
    return sampler.beta.copy()


# ------------------------------------------------------------------ sampling


@dataclass
class ChainSamples:
    """Thinned post-burn-in draws, possibly concatenated over chains."""

    p: int
    variant: VariantPattern
    site_ids: list
    days: list
    entries: list            # 0-based (row, col) of sampled A entries
    active: list             # active latent-process indices
    beta: np.ndarray         # (D, T, q)
    A_entries: np.ndarray    # (D, n_entries)
    tau2: np.ndarray         # (D, p)
    w: np.ndarray            # (D, T, n_active, n_s)
    xi2: np.ndarray | None
    chain_ids: np.ndarray
    seed: int
    n_iter: int
    burn_in: int
    thin: int
    acceptance: dict = field(default_factory=dict)

    @property
    def q(self) -> int:
        return self.p * (self.p + 1)

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0]

    def A_matrix(self, d: int) -> np.ndarray:
        A = np.zeros((self.q, self.q))
        for val, (r, c) in zip(self.A_entries[d], self.entries):
            A[r, c] = val
        return A

    def w_full(self, d: int) -> np.ndarray:
        """(T, q, n_s) latent fields with inactive processes zero."""
        out = np.zeros((len(self.days), self.q, len(self.site_ids)))
        for pos, k in enumerate(self.active):
            out[:, k, :] = self.w[d, :, pos, :]
        return out

    def beta_local(self, d: int, gamma=None) -> np.ndarray:
        """(T, q, n_s) local adjustments implied by draw d."""
        A = self.A_matrix(d)
        out = np.einsum("mk,tkn->tmn", A, self.w_full(d))
        if gamma is not None:
            g = np.asarray(gamma, dtype=float)
            for t in range(1, out.shape[0]):
                out[t] += g[:, None] * out[t - 1]
        return out

    def entry_label(self, idx: int) -> str:
        r, c = self.entries[idx]
        return f"A_{r + 1}_{c + 1}"

    def entry_draws(self, r: int, c: int) -> np.ndarray:
        """Draws of A at 1-based (r, c)."""
        idx = self.entries.index((r - 1, c - 1))
        return self.A_entries[:, idx]

    # ---------------------------------------------------------- flat matrix

    def parameter_names(self) -> list[str]:
        names = []
        T, q = len(self.days), self.q
        for t in range(T):
            for m in range(q):
                i, j = divmod(m, self.p + 1)
                names.append(f"beta_i{i + 1}_j{j}_t{self.days[t]}")
        names.extend(self.entry_label(e) for e in range(len(self.entries)))
        names.extend(f"tau2_{i + 1}" for i in range(self.p))
        if self.xi2 is not None:
            for m in range(q):
                i, j = divmod(m, self.p + 1)
                names.append(f"xi2_i{i + 1}_j{j}")
        return names

    def parameter_matrix(self) -> np.ndarray:
        cols = [self.beta.reshape(self.n_draws, -1), self.A_entries, self.tau2]
        if self.xi2 is not None:
            cols.append(self.xi2)
        return np.concatenate(cols, axis=1)

    # ------------------------------------------------------------------- I/O

    def save(self, out_dir, config_hash: str = "") -> None:
        """params.csv + beta_local.csv (wide, keyed by site/day) + meta.json."""
        import os

        os.makedirs(out_dir, exist_ok=True)
        names = self.parameter_names()
        mat = self.parameter_matrix()
        header_comment = f"# config_hash: {config_hash}"
        with open(os.path.join(out_dir, "params.csv"), "w", newline="") as fh:
            fh.write(header_comment + "\n")
            wtr = csv.writer(fh)
            wtr.writerow(["chain", "draw"] + names)
            for d in range(self.n_draws):
                wtr.writerow(
                    [int(self.chain_ids[d]), d] + [repr(float(v)) for v in mat[d]]
                )
        rows_coef = sorted({r for (r, c) in self.entries})
        with open(os.path.join(out_dir, "beta_local.csv"), "w", newline="") as fh:
            fh.write(header_comment + "\n")
            wtr = csv.writer(fh)
            wtr.writerow(["chain", "draw", "t", "coef"] + list(self.site_ids))
            for d in range(self.n_draws):
                bl = self.beta_local(d)
                for tpos, t in enumerate(self.days):
                    for m in rows_coef:
                        i, j = divmod(m, self.p + 1)
                        wtr.writerow(
                            [int(self.chain_ids[d]), d, t, f"i{i + 1}_j{j}"]
                            + [repr(float(v)) for v in bl[tpos, m]]
                        )
        meta = {
            "seed": self.seed,
            "config_hash": config_hash,
            "p": self.p,
            "variant": self.variant.value,
            "site_ids": list(self.site_ids),
            "days": [int(t) for t in self.days],
            "entries": [[int(r) + 1, int(c) + 1] for (r, c) in self.entries],
            "n_iter": self.n_iter,
            "burn_in": self.burn_in,
            "thin": self.thin,
            "n_draws": self.n_draws,
            "acceptance": self.acceptance,
        }
        with open(os.path.join(out_dir, "meta.json"), "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, out_dir) -> "ChainSamples":
        import os

        with open(os.path.join(out_dir, "meta.json")) as fh:
            meta = json.load(fh)
        p = meta["p"]
        q = p * (p + 1)
        variant = VariantPattern(meta["variant"])
        entries = [(r - 1, c - 1) for r, c in meta["entries"]]
        mask = variant_mask(variant, p)
        active = np.flatnonzero(mask.any(axis=0)).tolist()
        site_ids = meta["site_ids"]
        days = meta["days"]
        T, n_s = len(days), len(site_ids)

        with open(os.path.join(out_dir, "params.csv")) as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
        names = rows[0][2:]
        data = np.array([[float(v) for v in r[2:]] for r in rows[1:]])
        chain_ids = np.array([int(r[0]) for r in rows[1:]])
        D = data.shape[0]
        n_beta = T * q
        beta = data[:, :n_beta].reshape(D, T, q)
        A_entries = data[:, n_beta : n_beta + len(entries)]
        tau2 = data[:, n_beta + len(entries) : n_beta + len(entries) + p]
        xi2 = None
        if len(names) > n_beta + len(entries) + p:
            xi2 = data[:, n_beta + len(entries) + p :]

        # Recover w from the beta_local rows by triangular solves on the
        # active columns (each active column has its unmasked diagonal row).
        with open(os.path.join(out_dir, "beta_local.csv")) as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
        coef_of = {}
        for m in range(q):
            i, j = divmod(m, p + 1)
            coef_of[f"i{i + 1}_j{j}"] = m
        day_pos = {t: i for i, t in enumerate(days)}
        bl = np.zeros((D, T, q, n_s))
        for r in rows[1:]:
            d = int(r[1])
            tpos = day_pos[int(r[2])]
            m = coef_of[r[3]]
            bl[d, tpos, m] = [float(v) for v in r[4:]]
        w = np.zeros((D, T, len(active), n_s))
        for d in range(D):
            A = np.zeros((q, q))
            for val, (r_, c_) in zip(A_entries[d], entries):
                A[r_, c_] = val
            for pos, k in enumerate(active):
                resid = bl[d, :, k, :].copy()
                for pos2 in range(pos):
                    k2 = active[pos2]
                    resid -= A[k, k2] * w[d, :, pos2, :]
                w[d, :, pos, :] = resid / A[k, k]
        return cls(
            p=p,
            variant=variant,
            site_ids=site_ids,
            days=days,
            entries=entries,
            active=active,
            beta=beta,
            A_entries=A_entries,
            tau2=tau2,
            w=w,
            xi2=xi2,
            chain_ids=chain_ids,
            seed=meta["seed"],
            n_iter=meta["n_iter"],
            burn_in=meta["burn_in"],
            thin=meta["thin"],
            acceptance=meta.get("acceptance", {}),
        )


def _run_single_chain(dataset, spec, n_iter, burn_in, thin, seed, chain_id):
    sampler = GibbsSampler(dataset, spec)
    rng = substream(seed, "chain", chain_id)
    beta_draws, A_draws, tau_draws, w_draws, xi_draws = [], [], [], [], []
    dynamic = spec.temporal.overall is OverallTime.DYNAMIC
    for it in range(n_iter):
        if it == burn_in:
            sampler.freeze_adaptation()
        sampler.sweep(rng)
        if it >= burn_in and (it - burn_in) % thin == 0:
            beta_draws.append(sampler.beta.copy())
            A_draws.append(np.array([sampler.A[e] for e in sampler.entries]))
            tau_draws.append(sampler.tau2.copy())
            w_draws.append(sampler.w[:, sampler.coreg_active, :].copy())
            if dynamic:
                xi_draws.append(sampler.xi2.copy())
    return sampler, beta_draws, A_draws, tau_draws, w_draws, xi_draws


def run_chain(
    dataset: AlignedDataset,
    spec: ModelSpec,
    n_iter: int = 20000,
    burn_in: int = 10000,
    thin: int = 10,
    seed: int = 0,
    n_chains: int = 1,
    threads: int = 1,
) -> ChainSamples:
    """Run the Gibbs sampler; deterministic given (dataset, spec, seed).

    Chains use independent substreams of the master seed and are merged in
    chain order, so results are identical for any thread count.
    """
    if burn_in >= n_iter:
        raise ValueError("burn_in must be smaller than n_iter")
    if (n_iter - burn_in) % thin != 0:
        raise ValueError("(n_iter - burn_in) must be divisible by thin")

    def job(c):
        return _run_single_chain(dataset, spec, n_iter, burn_in, thin, seed, c)

    if threads > 1 and n_chains > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(job, range(n_chains)))
    else:
        results = [job(c) for c in range(n_chains)]

    sampler0 = results[0][0]
    dynamic = spec.temporal.overall is OverallTime.DYNAMIC
    beta = np.concatenate([np.stack(r[1]) for r in results])
    A_entries = np.concatenate([np.stack(r[2]) for r in results])
    tau2 = np.concatenate([np.stack(r[3]) for r in results])
    w = np.concatenate([np.stack(r[4]) for r in results])
    xi2 = np.concatenate([np.stack(r[5]) for r in results]) if dynamic else None
    per_chain = (n_iter - burn_in) // thin
    chain_ids = np.repeat(np.arange(n_chains), per_chain)
    acceptance = {str(c): results[c][0].acceptance_rates() for c in range(n_chains)}
    return ChainSamples(
        p=spec.p,
        variant=spec.variant,
        site_ids=sampler0.site_ids,
        days=sampler0.days,
        entries=sampler0.entries,
        active=sampler0.coreg_active.tolist(),
        beta=beta,
        A_entries=A_entries,
        tau2=tau2,
        w=w,
        xi2=xi2,
        chain_ids=chain_ids,
        seed=seed,
        n_iter=n_iter,
        burn_in=burn_in,
        thin=thin,
        acceptance=acceptance,
    )


# --------------------------------------------------------------- diagnostics


def effective_sample_size(x) -> float:
    """ESS by Geyer's initial monotone positive sequence (NaN if constant)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        raise InsufficientDraws("need at least 4 draws for ESS")
    xc = x - x.mean()
    if np.allclose(xc, 0.0):
        return float("nan")
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, m)
    acov = np.fft.irfft(f * np.conj(f), m)[:n].real / n
    rho = acov / acov[0]
    tau = 0.0
    prev = np.inf
    for k in range(0, n // 2):
        gamma = rho[2 * k] + (rho[2 * k + 1] if 2 * k + 1 < n else 0.0)
        if gamma <= 0.0:
            break
        gamma = min(gamma, prev)
        prev = gamma
        tau += gamma
    tau = max(2.0 * tau - 1.0, 1.0 / n)
    return float(n / tau)


def split_rhat(chains) -> float:
    """Split-R-hat over a (m, n) array of chains (NaN if variance is zero)."""
    arr = np.asarray(chains, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise InsufficientDraws("split R-hat needs at least 2 chains")
    n = arr.shape[1]
    if n < 4:
        raise InsufficientDraws("need at least 4 draws per chain")
    half = n // 2
    halves = np.concatenate([arr[:, :half], arr[:, half : 2 * half]], axis=0)
    w_var = halves.var(axis=1, ddof=1).mean()
    if w_var == 0.0:
        return float("nan")
    b_var = half * halves.mean(axis=1).var(ddof=1)
    var_plus = (half - 1) / half * w_var + b_var / half
    return float(np.sqrt(var_plus / w_var))


def chain_diagnostics(samples: ChainSamples) -> dict:
    """Per-parameter ESS and split-R-hat, plus Metropolis acceptance rates.

    R-hat needs at least two chains in the sample set; constant parameters
    are flagged rather than scored.
    """
    if samples.n_draws < 4:
        raise InsufficientDraws("need at least 4 draws for diagnostics")
    names = samples.parameter_names()
    mat = samples.parameter_matrix()
    chain_labels = np.unique(samples.chain_ids)
    rows = {}
    for idx, name in enumerate(names):
        x = mat[:, idx]
        if np.allclose(x, x[0]):
            rows[name] = {"ess": float("nan"), "rhat": float("nan"), "flag": "constant"}
            continue
        ess = effective_sample_size(x)
        rhat = float("nan")
        if len(chain_labels) >= 2:
            per = [x[samples.chain_ids == c] for c in chain_labels]
            min_len = min(len(v) for v in per)
            rhat = split_rhat(np.stack([v[:min_len] for v in per]))
        rows[name] = {"ess": ess, "rhat": rhat, "flag": ""}
    return {"parameters": rows, "acceptance": samples.acceptance}
