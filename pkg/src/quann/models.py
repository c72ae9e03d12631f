"""Set-function models: QUANN-1/2, the Janossy baselines, the ablations, and the
permutation-equivariant QUANN layer."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .autodiff import Segments, ShapeError, Tensor, concat, scatter, softplus
from .nets import ConfigError, Mlp, MlpSpec, PairwiseEncoder, RevNet, RevNetSpec, read_checkpoint, write_checkpoint
from .nkm import EmptySetError, SetBatch, pool_fixed, pool_nkm, pool_power_mean

__all__ = [
    "FAMILIES",
    "UNARY_FAMILIES",
    "BINARY_FAMILIES",
    "NKM_FAMILIES",
    "ModelConfig",
    "SetModel",
    "default_config",
    "build_model",
    "loss_mse",
]

FAMILIES = ("quann1", "quann2", "deepset", "pointnet", "norm_deepset", "hpds",
            "settransformer_j2", "ablation1", "ablation2", "ablation3")
BINARY_FAMILIES = frozenset({"quann2", "settransformer_j2"})
UNARY_FAMILIES = frozenset(FAMILIES) - BINARY_FAMILIES
# families whose pooling runs through a learnable generating function
NKM_FAMILIES = frozenset({"quann1", "quann2", "ablation3"})
# families built on the reduced (one hidden layer) encoder/estimator
_REDUCED = frozenset({"quann1", "quann2", "ablation1", "ablation3"})

POWER_SHIFT = 1e-3
PARAM_MATCH_TOL = 0.05


@dataclass(frozen=True)
class ModelConfig:
    family: str
    element_width: int
    latent_width: int
    output_width: int
    encoder: MlpSpec
    estimator: MlpSpec
    generator: RevNetSpec | None = None
    seed: int = 0
    attn_width: int = 16
    equivariant: bool = False

    def validate(self) -> None:
        def bad(name, msg):
            raise ConfigError(f"field {name!r}: {msg}")

        if self.family not in FAMILIES:
            bad("family", f"unknown family {self.family!r}; expected one of {', '.join(FAMILIES)}")
        for name in ("element_width", "latent_width", "output_width"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        has_gen = self.generator is not None
        if has_gen != (self.family in NKM_FAMILIES):
            bad("generator", f"required iff family is one of {sorted(NKM_FAMILIES)}")
        if has_gen:
            if self.latent_width % 2:
                bad("latent_width", "must be even when a RevNet generator is used")
            if self.generator.dim != self.latent_width:
                bad("generator", f"dim {self.generator.dim} != latent_width {self.latent_width}")
        enc_in = self.element_width + (self.attn_width if self.family in BINARY_FAMILIES else 0)
        if self.encoder.in_width != enc_in:
            bad("encoder", f"input width {self.encoder.in_width} != {enc_in}")
        if self.encoder.out_width != self.latent_width:
            bad("encoder", f"output width {self.encoder.out_width} != latent_width {self.latent_width}")
        est_in = self.latent_width + (self.element_width if self.equivariant else 0)
        if self.estimator.in_width != est_in:
            bad("estimator", f"input width {self.estimator.in_width} != {est_in}")
        if self.estimator.out_width != self.output_width:
            bad("estimator", f"output width {self.estimator.out_width} != output_width {self.output_width}")
        if self.equivariant and self.family in BINARY_FAMILIES:
            bad("equivariant", "only unary families have an equivariant layer")
        if self.family == "ablation2":
            ref = default_config("quann1", self.element_width, self.latent_width, self.output_width,
                                 equivariant=self.equivariant)
            mine, target = _count(self), _count(ref)
            if abs(mine - target) > PARAM_MATCH_TOL * target:
                bad("encoder", f"ablation2 has {mine} parameters, not within 5% of quann1's {target}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = MlpSpec(**d["encoder"])
        d["estimator"] = MlpSpec(**d["estimator"])
        if d.get("generator") is not None:
            d["generator"] = RevNetSpec(**d["generator"])
        return cls(**d)


def _count(cfg: ModelConfig) -> int:
    n = cfg.encoder.param_count + cfg.estimator.param_count
    if cfg.generator is not None:
        n += cfg.generator.param_count
    if cfg.family in BINARY_FAMILIES:
        n += 3 * cfg.element_width * cfg.attn_width
    if cfg.family == "hpds":
        n += 1
    return n


def _ablation2_width(enc_in, est_in, latent_width, output_width, hidden, target) -> int:
    """Width of the extra hidden layer that brings ablation2 closest to target."""
    best, best_gap = 1, None
    for h in range(1, 4 * hidden + 1):
        enc = MlpSpec((enc_in, hidden, h, latent_width))
        est = MlpSpec((est_in, hidden, h, output_width))
        gap = abs(enc.param_count + est.param_count - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = h, gap
    return best


def default_config(family: str, element_width: int = 16, latent_width: int = 16,
                   output_width: int = 16, seed: int = 0, hidden: int = 128,
                   revnet_blocks: int = 4, revnet_hidden: tuple[int, ...] = (16,),
                   attn_width: int = 16, equivariant: bool = False) -> ModelConfig:
    """Synthetic-benchmark architecture for ``family``.

    QUANN-style families get one hidden layer in the encoder and estimator,
    the baselines two, so that parameter counts stay comparable.
    """
    if family not in FAMILIES:
        raise ConfigError(f"field 'family': unknown family {family!r}; expected one of {', '.join(FAMILIES)}")
    enc_in = element_width + (attn_width if family in BINARY_FAMILIES else 0)
    est_in = latent_width + (element_width if equivariant else 0)
    generator = RevNetSpec(latent_width, revnet_blocks, revnet_hidden) if family in NKM_FAMILIES else None
    if family in _REDUCED:
        enc = MlpSpec((enc_in, hidden, latent_width))
        est = MlpSpec((est_in, hidden, output_width))
    elif family == "ablation2":
        ref = default_config("quann1", element_width, latent_width, output_width, hidden=hidden,
                             revnet_blocks=revnet_blocks, revnet_hidden=revnet_hidden,
                             equivariant=equivariant)
        h = _ablation2_width(enc_in, est_in, latent_width, output_width, hidden, _count(ref))
        enc = MlpSpec((enc_in, hidden, h, latent_width))
        est = MlpSpec((est_in, hidden, h, output_width))
    else:
        enc = MlpSpec((enc_in, hidden, hidden, latent_width))
        est = MlpSpec((est_in, hidden, hidden, output_width))
    cfg = ModelConfig(family, element_width, latent_width, output_width, enc, est, generator,
                      seed, attn_width, equivariant)
    cfg.validate()
    return cfg


def _pair_index(segments: Segments) -> tuple[np.ndarray, np.ndarray, Segments]:
    """Ordered pairs (i, j), i != j, within each segment, laid out segment by segment."""
    if (segments.counts < 2).any():
        bad = int(np.flatnonzero(segments.counts < 2)[0])
        raise EmptySetError(f"binary models need at least 2 elements per set; set {bad} has "
                            f"{int(segments.counts[bad])}")
    firsts, seconds = [], []
    for start, n in zip(segments.starts, segments.counts):
        i, j = np.divmod(np.arange(n * n), n)
        keep = i != j
        firsts.append(start + i[keep])
        seconds.append(start + j[keep])
    pair_counts = segments.counts * (segments.counts - 1)
    return np.concatenate(firsts), np.concatenate(seconds), Segments.from_counts(pair_counts)


class SetModel:
    """A configured composition rho(pool(phi(...))) for one model family."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        # build order is fixed so shared components get identical draws across families
        if config.family in BINARY_FAMILIES:
            self.phi = PairwiseEncoder.build(config.element_width, config.attn_width, config.encoder, rng)
        else:
            self.phi = Mlp(config.encoder, rng)
        self.rho = Mlp(config.estimator, rng)
        self.psi = RevNet(config.generator, rng) if config.generator is not None else None
        self.power = Tensor(1.0, requires_grad=True) if config.family == "hpds" else None

    @property
    def family(self) -> str:
        return self.config.family

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.phi.named_parameters("phi.")
        if self.psi is not None:
            yield from self.psi.named_parameters("psi.")
        yield from self.rho.named_parameters("rho.")
        if self.power is not None:
            yield "pool.power", self.power

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_groups(self) -> dict[str, list[Tensor]]:
        groups: dict[str, list[Tensor]] = {}
        for name, p in self.named_parameters():
            groups.setdefault(name.split(".", 1)[0], []).append(p)
        return groups

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- forward -------------------------------------------------------------
    def _check_batch(self, batch: SetBatch) -> None:
        if batch.width != self.config.element_width:
            raise ShapeError(f"model expects element width {self.config.element_width}, got {batch.width}")
        batch.require_nonempty()

    def pooled(self, batch: SetBatch) -> Tensor:
        """The aggregated latent per set, i.e. everything before rho."""
        self._check_batch(batch)
        fam = self.family
        rows, seg = batch.rows(), batch.segments
        if fam in BINARY_FAMILIES:
            first, second, pair_seg = _pair_index(seg)
            latents = self.phi(rows[first], rows[second])
            if fam == "quann2":
                return pool_nkm(self.psi, latents, pair_seg, normalize=True)
            return pool_fixed("sum", latents, pair_seg)
        latents = self.phi(rows)
        if fam == "quann1":
            return pool_nkm(self.psi, latents, seg, normalize=True)
        if fam == "ablation3":
            return pool_nkm(self.psi, latents, seg, normalize=False)
        if fam in ("ablation1", "ablation2", "norm_deepset"):
            return pool_fixed("mean", latents, seg)
        if fam == "deepset":
            return pool_fixed("sum", latents, seg)
        if fam == "pointnet":
            return pool_fixed("max", latents, seg)
        if fam == "hpds":
            return pool_power_mean(self.power, softplus(latents) + POWER_SHIFT, seg)
        raise AssertionError(fam)

    def forward(self, batch: SetBatch) -> Tensor:
        if self.config.equivariant:
            raise ConfigError("field 'equivariant': this model is configured as an equivariant layer; "
                              "use equivariant_forward")
        return self.rho(self.pooled(batch))

    __call__ = forward

    def equivariant_forward(self, batch: SetBatch) -> Tensor:
        """Per element rho(concat(x_i, pooled)); output is (batch, n_max, out), zero-padded."""
        if not self.config.equivariant:
            raise ConfigError("field 'equivariant': model was not built as an equivariant layer")
        pooled = self.pooled(batch)
        rows = batch.rows()
        per_elem = self.rho(concat((rows, pooled[batch.segments.ids]), axis=-1))
        shape = (batch.batch_size, batch.data.shape[1], self.config.output_width)
        return scatter(per_elem, shape, batch.index)

    def post_step(self) -> None:
        """Re-impose parameter constraints after an optimiser update."""
        if self.power is not None and abs(float(self.power.data)) < 1e-3:
            self.power.data[...] = np.copysign(1e-3, float(self.power.data) or 1.0)

    # -- persistence -----------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"state mismatch; missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    def save(self, path) -> None:
        write_checkpoint(path, self.state_dict(), family=self.family)

    @classmethod
    def load(cls, path, config: ModelConfig) -> "SetModel":
        state, family = read_checkpoint(path)
        if family != config.family:
            raise ValueError(f"checkpoint holds a {family!r} model, config says {config.family!r}")
        model = cls(config)
        model.load_state_dict(state)
        return model


def build_model(config: ModelConfig) -> SetModel:
    return SetModel(config)


def loss_mse(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    return (diff * diff).mean()
