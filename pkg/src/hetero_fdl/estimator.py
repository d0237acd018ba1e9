"""Scikit-learn style wrapper around the graph recommender pipeline.

``HgatRecommender`` follows the estimator protocol: hyperparameters in
``__init__`` (untouched until ``fit``), ``get_params``/``set_params`` from
``BaseEstimator``, learned state in trailing-underscore attributes. ``fit``
takes claim records (or a claims CSV path), builds the masked training graph,
trains with the selected mode, and keeps one model per worker; ``predict``
ranks each patient's held-out candidate doctors and ``score`` returns the
mean per-patient AUC on the masked tail.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import fdl, hgat, topology as tp
from .ehr_graph import Claim, NodeKind, chronological_mask, read_claims
from .errors import WorkbenchError
from .features import init_features
from .objectives import HgatObjective, build_training_samples, estimate_lipschitz, evaluate_split
from .validation import (
    check_choice,
    check_fraction,
    check_positive_int,
    check_weights,
)


class HgatRecommender(BaseEstimator):
    """Doctor recommender over heterogeneous claims graphs.

    Parameters mirror the experiment config: model widths, loss weights, the
    optimizer (step size, refresh period, batch size, rounds) and the training
    mode. ``mode="local"``/``"fdl"`` train one worker per patient region;
    ``"fdl"`` additionally mixes over `topology` ("ring", "complete", "star",
    or an explicit mixing matrix).
    """

    def __init__(
        self,
        f_prime=16,
        heads=2,
        layers=2,
        d_v=None,
        combine="average",
        score_mode="dot",
        heterogeneous=True,
        feature_scheme="gaussian",
        feature_dim=8,
        loss_weights=(1.0, 1.0, 1.0),
        mask_fraction=0.65,
        candidate_size=25,
        neighbor_samples=5,
        mode="global",
        topology="ring",
        gamma=0.2,
        q="auto",
        batch_size="auto",
        rounds=150,
        l2=0.0,
        eval_every=0,
        strict_step_size=False,
        random_state=0,
    ):
        self.f_prime = f_prime
        self.heads = heads
        self.layers = layers
        self.d_v = d_v
        self.combine = combine
        self.score_mode = score_mode
        self.heterogeneous = heterogeneous
        self.feature_scheme = feature_scheme
        self.feature_dim = feature_dim
        self.loss_weights = loss_weights
        self.mask_fraction = mask_fraction
        self.candidate_size = candidate_size
        self.neighbor_samples = neighbor_samples
        self.mode = mode
        self.topology = topology
        self.gamma = gamma
        self.q = q
        self.batch_size = batch_size
        self.rounds = rounds
        self.l2 = l2
        self.eval_every = eval_every
        self.strict_step_size = strict_step_size
        self.random_state = random_state

    # -- fitting ------------------------------------------------------------

    def _claims_from(self, X):
        if isinstance(X, (str, bytes)) or hasattr(X, "__fspath__"):
            return read_claims(X)
        claims = list(X)
        if not claims or not all(isinstance(c, Claim) for c in claims):
            raise WorkbenchError("fit expects claim records or a claims CSV path")
        return claims

    def fit(self, X, y=None):
        check_choice("mode", self.mode, ("local", "global", "fdl"))
        check_choice("feature_scheme", self.feature_scheme, ("gaussian", "onehot", "pmi"))
        check_fraction("mask_fraction", self.mask_fraction)
        check_positive_int("rounds", self.rounds)
        check_positive_int("feature_dim", self.feature_dim)
        weights = check_weights("loss_weights", self.loss_weights)
        seed = check_positive_int("random_state", self.random_state, minimum=0)

        claims = self._claims_from(X)
        regions = sorted({c.patient_region for c in claims})
        if self.mode == "global":
            shards = {"pooled": claims}
        else:
            shards = {r: [c for c in claims if c.patient_region == r] for r in regions}
        splits = {
            name: chronological_mask(rows, self.mask_fraction, self.candidate_size, seed, node_universe=claims)
            for name, rows in shards.items()
        }
        graph = next(iter(splits.values())).graph
        dims = {k: self.feature_dim for k in (NodeKind.PATIENT, NodeKind.DOCTOR, NodeKind.SERVICE)}
        features = init_features(
            graph,
            self.feature_scheme,
            dims=None if self.feature_scheme == "onehot" else dims,
            seed=seed,
            include_doctor_specialty=(weights[0] == 0),
        )
        in_dims = {k: features.for_kind(k).shape[1] for k in (NodeKind.PATIENT, NodeKind.DOCTOR, NodeKind.SERVICE)}
        config = hgat.ModelConfig(
            in_dims=in_dims,
            f_prime=self.f_prime,
            heads=self.heads,
            layers=self.layers,
            d_v=self.d_v,
            combine=self.combine,
            score_mode=self.score_mode,
            heterogeneous=self.heterogeneous,
            n_specialties=max(len(graph.specialty_names), 1),
            n_services=max(graph.n_services, 1),
        )
        names = list(splits)
        objectives = []
        for i, name in enumerate(names):
            plan_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
            samples = build_training_samples(splits[name], seed=plan_seed)
            objectives.append(
                HgatObjective(
                    splits[name].graph, features, config, samples,
                    weights=weights, sample_size=self.neighbor_samples, plan_seed=plan_seed, l2=self.l2,
                )
            )

        W = None
        if self.mode == "fdl":
            if isinstance(self.topology, str):
                check_choice("topology", self.topology, tuple(tp.NAMED_GRAPHS))
                W = tp.metropolis_weights(tp.NAMED_GRAPHS[self.topology](len(names)), len(names))
            else:
                W = tp.validate(np.asarray(self.topology, dtype=np.float64))

        x0 = hgat.HgatParams.init(config, seed).flatten()
        lipschitz = None
        if self.strict_step_size or self.gamma == "auto":
            lipschitz = max(estimate_lipschitz(obj, x0, iters=12, seed=seed) for obj in objectives)

        result = fdl.run(
            self.mode,
            objectives,
            x0,
            W=W,
            gamma=self.gamma,
            q=self.q,
            batch_size=self.batch_size,
            rounds=self.rounds,
            seed=seed,
            strict_step_size=self.strict_step_size,
            lipschitz=lipschitz,
            diag_every=max(self.rounds // 10, 1),
            eval_every=self.eval_every,
        )

        self.model_config_ = config
        self.features_ = features
        self.splits_ = splits
        self.worker_names_ = names
        self.regions_ = regions
        self.params_ = {
            name: hgat.HgatParams.unflatten(result.final_x[i], config) for i, name in enumerate(names)
        }
        self.contexts_ = {name: objectives[i].ctx for i, name in enumerate(names)}
        self.result_ = result
        self.patient_region_ = {
            pid: graph.region_names[int(graph.patient_region[i])] for i, pid in enumerate(graph.patient_ids)
        }
        self.patient_index_ = {pid: i for i, pid in enumerate(graph.patient_ids)}
        self.doctor_ids_ = list(graph.doctor_ids)
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this HgatRecommender instance is not fitted yet")

    def _worker_for(self, patient_id: str) -> str:
        if self.mode == "global":
            return "pooled"
        return self.patient_region_[patient_id]

    def _embeddings(self, name: str) -> np.ndarray:
        from . import tape

        params = self.params_[name]
        ptensors = {nm: tape.Tensor(arr) for nm, arr in params.arrays.items()}
        return hgat.embed_tape(self.contexts_[name], self.features_, ptensors, self.model_config_).value

    # -- inference ------------------------------------------------------------

    def predict(self, X):
        """Ranked candidate doctor ids (best first) per patient id in X."""
        self._check_fitted()
        out = []
        for pid in X:
            name = self._worker_for(pid)
            split = self.splits_[name]
            p = self.patient_index_[pid]
            cands = split.candidates.get(p, ())
            if not cands:
                out.append([])
                continue
            embed = self._embeddings(name)
            ctx = self.contexts_[name]
            po, do = ctx.offsets[NodeKind.PATIENT], ctx.offsets[NodeKind.DOCTOR]
            ep = embed[po + p]
            if self.model_config_.score_mode == "bilinear":
                ep = ep @ self.params_[name].arrays["score.bilinear"]
            scores = embed[do + np.asarray(cands)] @ ep
            order = np.argsort(-scores, kind="stable")
            out.append([self.doctor_ids_[cands[i]] for i in order])
        return out

    def score(self, X=None, y=None) -> float:
        """Mean per-patient AUC over the held-out tails of the fitted split."""
        self._check_fitted()
        aucs = []
        for name in self.worker_names_:
            res = evaluate_split(
                self.splits_[name].graph,
                self.features_,
                self.params_[name],
                self.splits_[name],
                sample_size=self.neighbor_samples,
                ctx=self.contexts_[name],
            )
            if res["patients"]:
                aucs.append(res["auc"])
        return float(np.mean(aucs))
