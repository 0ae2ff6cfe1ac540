"""
Skill-conditioned imitation models.

``SkillModel`` holds the language encoder, the observation encoder, a skill predictor
that emits a pre-quantization embedding every H steps, the codebook and a policy that
sees only the current skill code and the states of the current segment. ``FlatModel``
is the language-conditioned baseline without skills.
"""

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from langskill import autodiff as ad
from langskill import clustering
from langskill.autodiff import Tensor
from langskill.codebook import Codebook, QuantizeResult, quantize
from langskill.errors import ShapeError
from langskill.nn_blocks import CausalTransformer, Linear, Module, PositionalEmbedding, TransformerConfig
from langskill.world.grammar import VOCAB
from langskill.world.grid import HEIGHT, NUM_ACTIONS, NUM_CARRY_CATEGORIES, NUM_CELL_CATEGORIES, OBS_LENGTH, WIDTH

VARIANTS = ("lisa", "flat", "mlp-predictor", "continuous", "kmeans")
SKILL_VARIANTS = ("lisa", "mlp-predictor", "continuous", "kmeans")
MAX_INSTRUCTION_LEN = 32
OBS_TABLE_ROWS = WIDTH * HEIGHT * NUM_CELL_CATEGORIES + 4 + NUM_CARRY_CATEGORIES


@dataclass
class ModelConfig:
    """Architecture keys shared by every variant."""

    variant: str = "lisa"
    embed_dim: int = 64
    n_heads: int = 4
    n_layers: int = 1
    flat_layers: int = 2
    lang_layers: int = 1
    dropout: float = 0.1
    num_skills: int = 20
    code_dim: int = 16
    horizon: int = 10
    predictor_context: int = 64
    max_seq_len: int = 128
    ema_decay: float = 0.99

    def transformer(self, n_layers: int, max_seq_len: int) -> TransformerConfig:
        return TransformerConfig(
            n_layers=n_layers,
            embed_dim=self.embed_dim,
            n_heads=self.n_heads,
            dropout=self.dropout,
            max_seq_len=max_seq_len,
        )


def observation_ids(states: np.ndarray) -> np.ndarray:
    """Row ids into the observation table for each entry of each categorical state."""
    states = np.asarray(states, dtype=np.int64)
    if states.ndim != 2 or states.shape[1] != OBS_LENGTH:
        raise ShapeError("observation_ids", states.shape, (OBS_LENGTH,))
    cells = WIDTH * HEIGHT
    ids = np.empty_like(states)
    ids[:, :cells] = states[:, :cells] + np.arange(cells) * NUM_CELL_CATEGORIES
    ids[:, cells] = cells * NUM_CELL_CATEGORIES + states[:, cells]
    ids[:, cells + 1] = cells * NUM_CELL_CATEGORIES + 4 + states[:, cells + 1]
    return ids


class ObsEncoder(Module):
    """Linear map of the one-hot grid, computed as a sum of embedding rows."""

    def __init__(self, embed_dim: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.table = Tensor(rng.normal(0.0, 0.02, size=(OBS_TABLE_ROWS, embed_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(embed_dim), requires_grad=True)

    def __call__(self, states: np.ndarray) -> Tensor:
        rows = ad.embedding(self.table, observation_ids(states))
        return ad.sum_(rows, axis=1) + self.bias


class LangEncoder(Module):
    """Per-token language features: embeddings, positions and optional causal layers."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.token_table = Tensor(rng.normal(0.0, 0.02, size=(len(VOCAB), cfg.embed_dim)), requires_grad=True)
        self.positions = PositionalEmbedding(MAX_INSTRUCTION_LEN, cfg.embed_dim, rng)
        self.transformer = (
            CausalTransformer(cfg.transformer(cfg.lang_layers, MAX_INSTRUCTION_LEN), rng) if cfg.lang_layers else None
        )

    def __call__(self, token_ids: Sequence[int], rng: Optional[np.random.Generator] = None) -> Tensor:
        if len(token_ids) == 0:
            raise ValueError("instruction has no tokens")
        x = ad.embedding(self.token_table, token_ids) + self.positions(len(token_ids))
        return x if self.transformer is None else self.transformer(x, rng=rng)


class SkillPredictor(Module):
    """
    Causal transformer over [language tokens ; state embeddings] projected to the code
    dimension. The embedding for a segment starting at state t is read at that state's
    position, so it depends only on the language and states up to t.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.context = cfg.predictor_context
        self.positions = PositionalEmbedding(cfg.max_seq_len, cfg.embed_dim, rng)
        self.transformer = CausalTransformer(cfg.transformer(cfg.n_layers, cfg.max_seq_len), rng)
        self.head = Linear(cfg.embed_dim, cfg.code_dim, rng)

    def _encode(self, lang: Tensor, states: Tensor, rng) -> Tensor:
        x = ad.concat([lang, states], axis=0)
        x = x + self.positions(x.shape[0])
        return self.transformer(x, prefix_len=lang.shape[0], rng=rng)

    def predict(self, lang: Tensor, states: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        """z_tilde for the newest state, keeping the most recent ``context`` states."""
        if states.shape[0] == 0:
            raise ValueError("skill prediction needs at least one state")
        if states.shape[0] > self.context:
            states = states[states.shape[0] - self.context :]
        out = self._encode(lang, states, rng)
        return ad.reshape(self.head(out[[out.shape[0] - 1]]), (-1,))

    def segment_embeddings(
        self, lang: Tensor, states: Tensor, horizon: int, rng: Optional[np.random.Generator] = None
    ) -> List[Tensor]:
        length = states.shape[0]
        starts = list(range(0, length, horizon))
        if length > self.context:
            return [self.predict(lang, states[: start + 1], rng) for start in starts]
        out = self._encode(lang, states, rng)
        z = self.head(out[[lang.shape[0] + s for s in starts]])
        return [z[i] for i in range(len(starts))]


class MlpSkillPredictor(Module):
    """Two-layer MLP on [mean language embedding ; current state embedding]."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.fc_in = Linear(2 * cfg.embed_dim, cfg.embed_dim, rng)
        self.fc_out = Linear(cfg.embed_dim, cfg.code_dim, rng)

    def _embed(self, lang: Tensor, states: Tensor) -> Tensor:
        pooled = ad.mean(lang, axis=0, keepdims=True)
        tiled = ad.matmul(Tensor(np.ones((states.shape[0], 1))), pooled)
        return self.fc_out(ad.gelu(self.fc_in(ad.concat([tiled, states], axis=1))))

    def predict(self, lang: Tensor, states: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        return ad.reshape(self._embed(lang, states[[states.shape[0] - 1]]), (-1,))

    def segment_embeddings(
        self, lang: Tensor, states: Tensor, horizon: int, rng: Optional[np.random.Generator] = None
    ) -> List[Tensor]:
        starts = list(range(0, states.shape[0], horizon))
        z = self._embed(lang, states[starts])
        return [z[i] for i in range(len(starts))]


class SkillPolicy(Module):
    """Causal transformer over [code token ; segment states] with a 6-way action head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.horizon = cfg.horizon
        self.code_proj = Linear(cfg.code_dim, cfg.embed_dim, rng)
        self.positions = PositionalEmbedding(cfg.horizon + 1, cfg.embed_dim, rng)
        self.transformer = CausalTransformer(cfg.transformer(cfg.n_layers, cfg.horizon + 1), rng)
        self.action_head = Linear(cfg.embed_dim, NUM_ACTIONS, rng)

    def __call__(self, code: Tensor, window: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        """
        Action logits for every state in the window.

        :param code: Skill code of length D
        :type code: Tensor
        :param window: State embeddings since the code was issued, at most H rows
        :type window: Tensor
        :return: Logits of shape (window length, 6)
        :rtype: Tensor
        :raises ShapeError: If the window is empty or longer than H
        """
        if not 1 <= window.shape[0] <= self.horizon:
            raise ShapeError("policy_act", window.shape, detail=f"window must hold 1 to {self.horizon} states")
        token = self.code_proj(ad.reshape(code, (1, -1)))
        x = ad.concat([token, window], axis=0)
        x = x + self.positions(x.shape[0])
        out = self.transformer(x, prefix_len=1, rng=rng)
        return self.action_head(out[1:])


class FlatPolicy(Module):
    """Causal transformer over [language tokens ; all states] with an action head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.max_seq_len = cfg.max_seq_len
        self.positions = PositionalEmbedding(cfg.max_seq_len, cfg.embed_dim, rng)
        self.transformer = CausalTransformer(cfg.transformer(cfg.flat_layers, cfg.max_seq_len), rng)
        self.action_head = Linear(cfg.embed_dim, NUM_ACTIONS, rng)

    def __call__(self, lang: Tensor, states: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        keep = self.max_seq_len - lang.shape[0]
        if keep < 1:
            raise ShapeError("flat_act", lang.shape, detail=f"instruction fills max_seq_len {self.max_seq_len}")
        if states.shape[0] > keep:
            states = states[states.shape[0] - keep :]
        x = ad.concat([lang, states], axis=0)
        x = x + self.positions(x.shape[0])
        out = self.transformer(x, prefix_len=lang.shape[0], rng=rng)
        return self.action_head(out[lang.shape[0] :])


@dataclass
class TrajectoryLoss:
    """Per-trajectory losses plus the codebook assignments made on the way."""

    bc_loss: Tensor
    vq_loss: Optional[Tensor] = None
    assignments: List[Tuple[int, np.ndarray]] = field(default_factory=list)
    z_tildes: List[np.ndarray] = field(default_factory=list)
    code_indices: List[int] = field(default_factory=list)


class SkillModel(Module):
    """Skill predictor, codebook and skill policy of one of the skill variants."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__()
        if cfg.variant not in SKILL_VARIANTS:
            raise ValueError(f"variant must be one of {SKILL_VARIANTS} but {cfg.variant!r} given")
        self.cfg = cfg
        self.variant = cfg.variant
        self.horizon = cfg.horizon
        self.obs_encoder = ObsEncoder(cfg.embed_dim, rng)
        self.lang_encoder = LangEncoder(cfg, rng)
        if cfg.variant == "mlp-predictor":
            self.predictor = MlpSkillPredictor(cfg, rng)
        elif cfg.variant == "kmeans":
            self.predictor = None
        else:
            self.predictor = SkillPredictor(cfg, rng)
        self.policy = SkillPolicy(cfg, rng)
        self.codebook = (
            Codebook(cfg.num_skills, cfg.code_dim, rng=rng, decay=cfg.ema_decay)
            if cfg.variant != "continuous"
            else None
        )
        self.kmeans_centers: Optional[np.ndarray] = None
        self.kmeans_projection: Optional[np.ndarray] = None
        width = clustering.feature_dim(cfg.embed_dim)
        if cfg.variant == "kmeans" and width != cfg.code_dim:
            self.kmeans_projection = rng.normal(0.0, 1.0 / np.sqrt(cfg.code_dim), size=(width, cfg.code_dim))

    def parameter_groups(self) -> Dict[str, List[Tuple[str, Tensor]]]:
        groups = {
            "policy": list(self.obs_encoder.named_parameters("obs_encoder."))
            + list(self.policy.named_parameters("policy.")),
            "skill_predictor": [],
            "language": [],
        }
        if self.predictor is not None:
            groups["skill_predictor"] = list(self.predictor.named_parameters("predictor."))
        if self.variant != "kmeans":
            groups["language"] = list(self.lang_encoder.named_parameters("lang_encoder."))
        return groups

    @property
    def uses_ema(self) -> bool:
        return self.variant in ("lisa", "mlp-predictor")

    def select_code(self, z_tilde: Tensor) -> Tuple[Tensor, int, Optional[QuantizeResult]]:
        """Code fed to the policy, its index (-1 when continuous) and the lookup result."""
        if self.codebook is None:
            return z_tilde, -1, None
        result = quantize(self.codebook, z_tilde)
        return result.straight_through_output, result.code_index, result

    def language_feature(self, token_ids: Sequence[int]) -> np.ndarray:
        """Mean over tokens of the language encoder output, without dropout or a graph."""
        was_training = self.lang_encoder.training
        self.lang_encoder.eval()
        try:
            with ad.no_grad():
                pooled = ad.mean(self.lang_encoder(token_ids), axis=0)
        finally:
            self.lang_encoder.train(was_training)
        return pooled.values.copy()

    def set_kmeans_centers(self, centers: np.ndarray) -> None:
        """
        Install fitted cluster centers and write their code-width images into the codebook.

        :raises ShapeError: If the centers are not (K, feature width)
        """
        width = clustering.feature_dim(self.cfg.embed_dim)
        centers = np.asarray(centers, dtype=np.float64)
        if centers.shape != (self.cfg.num_skills, width):
            raise ShapeError("kmeans_centers", centers.shape, (self.cfg.num_skills, width))
        self.kmeans_centers = centers
        projected = centers if self.kmeans_projection is None else centers @ self.kmeans_projection
        self.codebook.vectors = projected.copy()

    def kmeans_code(self, language: np.ndarray, state: Sequence[int]) -> Tuple[Tensor, int]:
        """Projected center of the cluster nearest to the language-state feature."""
        if self.kmeans_centers is None:
            raise ValueError("k-means variant has no fitted centers")
        index = clustering.assign(self.kmeans_centers, clustering.segment_feature(language, state))
        return Tensor(self.codebook.vectors[index]), index

    def trajectory_loss(
        self, token_ids: Sequence[int], states: np.ndarray, actions: Sequence[int], rng=None
    ) -> TrajectoryLoss:
        """
        Segment the trajectory every H states, pick one code per segment and score the
        policy against the expert actions.

        :return: Token-mean BC loss, segment-mean commitment loss and the assignments
        :rtype: TrajectoryLoss
        """
        states = np.asarray(states)
        state_emb = self.obs_encoder(states)
        length = states.shape[0]
        starts = list(range(0, length, self.horizon))
        logits, commitments = [], []
        loss = TrajectoryLoss(bc_loss=None)
        if self.variant == "kmeans":
            language = self.language_feature(token_ids)
            codes = [self.kmeans_code(language, states[s]) for s in starts]
            embeddings = [None] * len(starts)
        else:
            lang = self.lang_encoder(token_ids, rng)
            embeddings = self.predictor.segment_embeddings(lang, state_emb, self.horizon, rng)
            codes = []
            for z_tilde in embeddings:
                code, index, result = self.select_code(z_tilde)
                codes.append((code, index))
                if result is not None:
                    commitments.append(result.commitment_loss)
                    loss.assignments.append((index, z_tilde.values.copy()))
                loss.z_tildes.append(z_tilde.values.copy())
        for start, (code, index) in zip(starts, codes):
            logits.append(self.policy(code, state_emb[start : start + self.horizon], rng))
            loss.code_indices.append(index)
        loss.bc_loss = ad.cross_entropy(ad.concat(logits, axis=0), actions)
        if commitments:
            stacked = ad.concat([ad.reshape(c, (1,)) for c in commitments])
            loss.vq_loss = ad.scale(ad.sum_(stacked), 1.0 / len(commitments))
        return loss

    def predict_code(self, token_ids: Sequence[int], seen_states: np.ndarray) -> Tuple[np.ndarray, int, np.ndarray]:
        """
        Code for the newest state, as used at inference every H steps.

        :return: Code vector, code index (-1 when continuous) and z_tilde
        :rtype: Tuple[np.ndarray, int, np.ndarray]
        """
        seen_states = np.asarray(seen_states)
        with ad.no_grad():
            if self.variant == "kmeans":
                code, index = self.kmeans_code(self.language_feature(token_ids), seen_states[-1])
                return code.values, index, code.values
            lang = self.lang_encoder(token_ids)
            z_tilde = self.predictor.predict(lang, self.obs_encoder(seen_states))
            code, index, _ = self.select_code(z_tilde)
        return code.values, index, z_tilde.values

    def act_logits(self, code: np.ndarray, window_states: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            logits = self.policy(Tensor(code), self.obs_encoder(np.asarray(window_states)))
        return logits.values[-1]

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {name: p.values for name, p in self.named_parameters()}
        if self.codebook is not None:
            arrays.update(self.codebook.state_arrays())
        if self.kmeans_centers is not None:
            arrays["kmeans.centers"] = self.kmeans_centers
        if self.kmeans_projection is not None:
            arrays["kmeans.projection"] = self.kmeans_projection
        return arrays


class FlatModel(Module):
    """Language-conditioned causal transformer policy over the whole trajectory."""

    variant = "flat"
    codebook = None

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.cfg = cfg
        self.obs_encoder = ObsEncoder(cfg.embed_dim, rng)
        self.lang_encoder = LangEncoder(cfg, rng)
        self.policy = FlatPolicy(cfg, rng)

    def parameter_groups(self) -> Dict[str, List[Tuple[str, Tensor]]]:
        return {
            "policy": list(self.obs_encoder.named_parameters("obs_encoder."))
            + list(self.policy.named_parameters("policy.")),
            "skill_predictor": [],
            "language": list(self.lang_encoder.named_parameters("lang_encoder.")),
        }

    @property
    def uses_ema(self) -> bool:
        return False

    def trajectory_loss(
        self, token_ids: Sequence[int], states: np.ndarray, actions: Sequence[int], rng=None
    ) -> TrajectoryLoss:
        lang = self.lang_encoder(token_ids, rng)
        logits = self.policy(lang, self.obs_encoder(np.asarray(states)), rng)
        return TrajectoryLoss(bc_loss=ad.cross_entropy(logits, actions))

    def act_logits(self, token_ids: Sequence[int], states: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            logits = self.policy(self.lang_encoder(token_ids), self.obs_encoder(np.asarray(states)))
        return logits.values[-1]

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.values for name, p in self.named_parameters()}


def build_model(cfg: ModelConfig, rng: np.random.Generator) -> Module:
    """Instantiate the model for ``cfg.variant``."""
    if cfg.variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS} but {cfg.variant!r} given")
    return FlatModel(cfg, rng) if cfg.variant == "flat" else SkillModel(cfg, rng)


def load_state_arrays(model: Module, arrays: Dict[str, np.ndarray]) -> None:
    """Copy named arrays into ``model``; every parameter must be present with its shape."""
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise KeyError(f"missing parameters {missing}")
    for name, param in params.items():
        values = np.asarray(arrays[name], dtype=np.float64)
        if values.shape != param.shape:
            raise ShapeError(name, values.shape, param.shape)
        param.values = values.copy()
    if getattr(model, "codebook", None) is not None and "codebook.vectors" in arrays:
        model.codebook.load_state_arrays(arrays)
    if "kmeans.projection" in arrays and isinstance(model, SkillModel):
        projection = np.asarray(arrays["kmeans.projection"], dtype=np.float64)
        if model.kmeans_projection is None or projection.shape != model.kmeans_projection.shape:
            raise ShapeError("kmeans.projection", projection.shape)
        model.kmeans_projection = projection.copy()
    if "kmeans.centers" in arrays and isinstance(model, SkillModel):
        model.set_kmeans_centers(np.asarray(arrays["kmeans.centers"], dtype=np.float64).copy())


def parameter_digest(model: Module) -> str:
    """SHA-1 over every parameter and codebook array, in name order."""
    digest = hashlib.sha1()
    for name, values in sorted(model.state_arrays().items()):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(values, dtype="<f8").tobytes())
    return digest.hexdigest()


@dataclass
class BottleneckAudit:
    passed: bool
    skipped: bool = False
    leaked_parameters: List[str] = field(default_factory=list)


def _reachable_leaves(output: Tensor, barrier_op: str) -> set:
    reached = set()
    stack = [output]
    seen = set()
    while stack:
        node = stack.pop()
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        reached.add(id(node))
        if node.op == barrier_op:
            continue
        stack.extend(node.parents)
    return reached


def audit_bottleneck(model: Module, token_ids: Sequence[int], states: np.ndarray) -> BottleneckAudit:
    """
    Check by graph reachability that the policy logits depend on the language encoder
    only through the quantized code.

    The straight-through lookup is the only node allowed to cut the path. The flat
    baseline has no bottleneck and is skipped.

    :return: Audit result naming any language parameter reaching the logits
    :rtype: BottleneckAudit
    """
    if not isinstance(model, SkillModel):
        return BottleneckAudit(passed=True, skipped=True)
    was_training = model.training
    model.eval()
    try:
        states = np.asarray(states)
        state_emb = model.obs_encoder(states)
        if model.variant == "kmeans":
            code, _ = model.kmeans_code(model.language_feature(token_ids), states[0])
        else:
            lang = model.lang_encoder(token_ids)
            code, _, _ = model.select_code(model.predictor.predict(lang, state_emb[[0]]))
        logits = model.policy(code, state_emb[: model.horizon])
    finally:
        model.train(was_training)
    reached = _reachable_leaves(logits, "straight_through")
    leaked = [name for name, p in model.lang_encoder.named_parameters("lang_encoder.") if id(p) in reached]
    return BottleneckAudit(passed=not leaked, leaked_parameters=leaked)
