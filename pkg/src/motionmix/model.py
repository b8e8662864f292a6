"""Model assembly: configuration, parameter construction, forward passes.

A model is one scene encoder (optionally replicated per head) plus E
prediction heads.  Each head owns L anchor embeddings, a gating stack that
fuses them with the combined scene embedding, and a shared output MLP mapping
each gated anchor to one mode's raw parameter vector.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .encoders import encode_scene, init_encoder_params
from .errors import DimensionError, ParseError, ValidationError
from .mcg import init_mcg_params
from .params import (ParamBundle, he_uniform_init, init_mlp_params,
                     load_checkpoint, save_checkpoint, uniform_init)
from .predictor import (DECODERS, DecodeSpec, GmmNodes,
                        InitialState, decode_modes, predict_head, to_gmm)
from .scene import (LEN_COL, VALID_COL, VX_COL, VY_COL, Scenario, current_pose,
                    to_agent_frame)


@dataclass
class ModelConfig:
    history_steps: int = 5
    future_steps: int = 40
    dt: float = 0.2
    lstm_hidden: int = 64
    mcg_width: int = 64
    mcg_depth: int = 5
    cg_hidden_layers: int = 2
    pooling: str = "max"
    max_road_segments: int = 128
    max_segment_length: float = 5.0
    n_heads: int = 5              # E
    modes_per_head: int = 64      # L
    n_modes: int = 6              # M, mixture size after aggregation
    decoder: str = "raw_states"
    poly_degree: int = 5
    anchor_dim: int = 64
    anchor_mode: str = "learned"  # learned | static
    kappa_max: float = 1.0 / 3.5
    v_floor: float = 0.1
    rear_axle: bool = True
    heading_aux_weight: float = 0.1
    poly_const_weight: float = 1.0
    sigma_min: float = 1e-3
    sigma_max: float = 1e3
    rho_scale: float = 0.99
    mean_scale: float = 10.0
    replicate_encoder: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.decoder not in DECODERS:
            raise ValidationError(f"unknown decoder {self.decoder!r}")
        if self.anchor_mode not in ("learned", "static"):
            raise ValidationError(f"unknown anchor_mode {self.anchor_mode!r}")
        if self.anchor_mode == "static" and self.decoder != "raw_states":
            raise ValidationError("static anchors require the raw_states decoder")
        if self.n_heads < 1 or self.modes_per_head < 1 or self.n_modes < 1:
            raise ValidationError("n_heads, modes_per_head and n_modes must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)

    @property
    def anchor_input_dim(self) -> int:
        # static anchors feed the head their flattened trajectory
        return 2 * self.future_steps if self.anchor_mode == "static" else self.anchor_dim


MEAN_INIT_GAINS = {        # per-decoder scale on the location rows
    "raw_states": 6.0,
    "raw_states_with_heading": 6.0,
    "polynomial": 3.0,
    "control": 2.0,        # integration amplifies; controls stay near O(1)
}
SIGMA_INIT_RAW = 1.0       # raw value feeding exp/softplus -> a few meters


def _shape_output_init(bundle: ParamBundle, prefix: str, last: int,
                       spec: DecodeSpec, spread_means: bool):
    """Rescale the head MLP's output layer so training can specialize modes.

    All modes share this MLP, so at a standard init they emit near-identical,
    near-zero trajectories; hard assignment then funnels every example to
    whichever mode happens to sit closest, that mode alone gets regression
    gradients, and the rest never move (the failure static anchor sets exist
    to prevent).  Spreading the initial trajectories apart restores the
    geometric tie between examples and modes: the rows of the output weight
    matrix that produce the trajectory location are scaled up so each anchor
    embedding maps to a distinct coarse trajectory.  Static anchors already
    start diverse, so ``spread_means`` is off for them.  The sigma biases
    start at a few meters in all cases, keeping the first gradients from
    being swamped by the quadratic term.
    """
    w = bundle[f"{prefix}W{last}"]
    b = bundle[f"{prefix}b{last}"]
    if spread_means:
        rows = spec.mean_slots()
        w.data[rows] *= MEAN_INIT_GAINS[spec.decoder]
        b.data[rows] = 0.0  # the bias is shared, so it only shifts all modes
    b.data[spec.sigma_slots()] = SIGMA_INIT_RAW


class PredictionModel:
    """Encoder(s) + E anchor-set prediction heads over one ParamBundle."""

    def __init__(self, config: ModelConfig, bundle: ParamBundle, encoders, head_mcgs,
                 head_mlp_sizes):
        self.config = config
        self.bundle = bundle
        self.encoders = encoders          # one entry, or E entries when replicated
        self.head_mcgs = head_mcgs
        self.head_mlp_sizes = head_mlp_sizes

    # -- construction ----------------------------------------------------

    @classmethod
    def build(cls, config: ModelConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(config.seed)
        bundle = ParamBundle()
        n_enc = config.n_heads if config.replicate_encoder else 1
        encoders = []
        for e in range(n_enc):
            encoders.append(init_encoder_params(
                bundle, rng, prefix=f"enc{e}.",
                history_steps=config.history_steps, dt=config.dt,
                lstm_hidden=config.lstm_hidden, mcg_width=config.mcg_width,
                mcg_depth=config.mcg_depth, cg_hidden_layers=config.cg_hidden_layers,
                pooling=config.pooling, max_road_segments=config.max_road_segments,
                max_segment_length=config.max_segment_length))
        combined_width = encoders[0].combined_width
        spec = DecodeSpec(decoder=config.decoder, future_steps=config.future_steps,
                          dt=config.dt, poly_degree=config.poly_degree)
        raw_width = spec.raw_width()
        head_mcgs = []
        mlp_sizes = [config.mcg_width, config.mcg_width, raw_width]
        a_dim = config.anchor_input_dim
        trainable_anchors = config.anchor_mode == "learned"
        for e in range(config.n_heads):
            for i in range(config.modes_per_head):
                # O(1) anchor entries keep the embeddings distinguishable
                # after the gating stack (learned-query style)
                init = rng.normal(0.0, 1.0, size=a_dim) if trainable_anchors \
                    else np.zeros(a_dim)
                bundle.add(f"head{e}.anchor{i:03d}", init, trainable=trainable_anchors)
            anchor_path = he_uniform_init if trainable_anchors else uniform_init
            head_mcgs.append(init_mcg_params(
                bundle, f"head{e}.mcg.", a_dim, config.mcg_width, config.mcg_depth,
                rng, context_in=combined_width, hidden_layers=config.cg_hidden_layers,
                pooling=config.pooling, elem_w_init=anchor_path))
            init_mlp_params(bundle, f"head{e}.mlp.", mlp_sizes, rng,
                            w_init=anchor_path)
            _shape_output_init(bundle, f"head{e}.mlp.", len(mlp_sizes) - 2, spec,
                               spread_means=trainable_anchors)
        return cls(config, bundle, encoders, head_mcgs, mlp_sizes)

    def set_static_anchors(self, trajectories: np.ndarray):
        """Install fixed anchor trajectories (L, T, 2); the head then predicts
        residual offsets around them."""
        cfg = self.config
        if cfg.anchor_mode != "static":
            raise ValidationError("model was not built with anchor_mode='static'")
        trajs = np.asarray(trajectories, dtype=np.float64)
        if trajs.shape != (cfg.modes_per_head, cfg.future_steps, 2):
            raise DimensionError(
                f"expected ({cfg.modes_per_head}, {cfg.future_steps}, 2), got {trajs.shape}")
        for e in range(cfg.n_heads):
            for i in range(cfg.modes_per_head):
                self.bundle[f"head{e}.anchor{i:03d}"].data = trajs[i].reshape(-1).copy()

    # -- forward ----------------------------------------------------------

    def decode_spec(self, head: int) -> DecodeSpec:
        cfg = self.config
        base = None
        if cfg.anchor_mode == "static":
            base = np.stack([
                self.bundle[f"head{head}.anchor{i:03d}"].data.reshape(cfg.future_steps, 2)
                for i in range(cfg.modes_per_head)])
        return DecodeSpec(decoder=cfg.decoder, future_steps=cfg.future_steps, dt=cfg.dt,
                          poly_degree=cfg.poly_degree, sigma_min=cfg.sigma_min,
                          sigma_max=cfg.sigma_max, rho_scale=cfg.rho_scale,
                          kappa_max=cfg.kappa_max, v_floor=cfg.v_floor,
                          rear_axle=cfg.rear_axle, mean_scale=cfg.mean_scale,
                          base_trajectories=base)

    def initial_state(self, scenario_af: Scenario, agent_id: str) -> InitialState:
        tr = scenario_af.track(agent_id)
        row = tr.states[scenario_af.current_index]
        if row[VALID_COL] <= 0.5:
            raise ValidationError(f"agent {agent_id!r} invalid at t=0")
        speed = math.hypot(row[VX_COL], row[VY_COL])
        length = float(row[LEN_COL]) if tr.object_type == "vehicle" else 0.0
        return InitialState(0.0, 0.0, 0.0, speed, length)

    def _anchors(self, head: int):
        return [self.bundle[f"head{head}.anchor{i:03d}"]
                for i in range(self.config.modes_per_head)]

    def forward_nodes(self, scenario_af: Scenario, agent_id: str,
                      head_indices=None) -> list:
        """Graph-valued mixtures for the selected heads of one (already
        agent-framed) scenario.  Returns a list of GmmNodes."""
        cfg = self.config
        heads = list(range(cfg.n_heads)) if head_indices is None else list(head_indices)
        init = self.initial_state(scenario_af, agent_id)
        shared = None
        if not cfg.replicate_encoder:
            shared = encode_scene(scenario_af, agent_id, self.encoders[0])
        out = []
        for e in heads:
            combined = shared if shared is not None else encode_scene(
                scenario_af, agent_id, self.encoders[e])
            raws = predict_head(combined.values, self._anchors(e), self.head_mcgs[e],
                                self.bundle, self.head_mlp_sizes, f"head{e}.mlp.")
            out.append(decode_modes(raws, self.decode_spec(e), init))
        return out

    def predict(self, scenario: Scenario, agent_id: str) -> list:
        """Per-head numpy mixtures for one scenario, in the world frame."""
        scn_af = to_agent_frame(scenario, agent_id)
        cfg = self.config
        init = self.initial_state(scn_af, agent_id)
        pose = current_pose(scenario, agent_id)
        shared = None
        if not cfg.replicate_encoder:
            shared = encode_scene(scn_af, agent_id, self.encoders[0])
        gmms = []
        for e in range(cfg.n_heads):
            combined = shared if shared is not None else encode_scene(
                scn_af, agent_id, self.encoders[e])
            raws = predict_head(combined.values, self._anchors(e), self.head_mcgs[e],
                                self.bundle, self.head_mlp_sizes, f"head{e}.mlp.")
            gmm = to_gmm(raws, self.decode_spec(e), init)
            gmms.append(gmm.transformed(pose.heading, (pose.x, pose.y)))
        return gmms

    # -- persistence -------------------------------------------------------

    def save(self, path):
        save_checkpoint(self.bundle, path, meta={"model_config": self.config.to_dict()})

    @classmethod
    def load(cls, path) -> "PredictionModel":
        loaded, meta = load_checkpoint(path)
        if "model_config" not in meta:
            raise ParseError(f"{path}: checkpoint is missing the model config")
        config = ModelConfig.from_dict(meta["model_config"])
        model = cls.build(config)
        want = set(model.bundle.names())
        have = set(loaded.names())
        if want != have:
            missing = sorted(want - have)[:3]
            extra = sorted(have - want)[:3]
            raise ParseError(
                f"{path}: parameters do not match the config "
                f"(missing {missing}, unexpected {extra})")
        for name in model.bundle.names():
            src = loaded[name]
            dst = model.bundle[name]
            if src.data.shape != dst.data.shape:
                raise ParseError(f"{path}: shape mismatch for {name!r}")
            dst.data = src.data.copy()
        return model
