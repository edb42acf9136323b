"""The assembled model (backbone, K shallow maps, K denoisers) and Nested-ensemble inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import perturb as P
from .backbone import Backbone
from .config import ExperimentConfig
from .data import Dataset, NormStats, gen_synthetic, load_dir, split
from .diffusion import Denoiser, NoiseSchedule, sample_chain
from .ensemble import CandidateGroup, EnsembleOutput, combine
from .numerics import RngStream, stream_id, tensor_digest
from .shallow import ShallowMap

DTYPES = {"float32": torch.float32, "float64": torch.float64}

STAGES = ("backbone", "shallow", "diffusion")


def init_stream(seed: int, *parts: object) -> RngStream:
    """Initialisation stream for one parameter group, e.g. ``("shallow", k)``."""
    return RngStream(seed, stream_id("init", *parts))


@dataclass
class Pipeline:
    config: ExperimentConfig
    num_classes: int
    class_names: tuple[str, ...]
    backbone: Backbone
    shallow: list[ShallowMap]
    denoisers: list[Denoiser]
    schedule: NoiseSchedule
    norm: NormStats | None = None
    stages_done: int = 0
    history: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: ExperimentConfig, num_classes: int = 2,
                   class_names: Sequence[str] = ()) -> "Pipeline":
        dtype = DTYPES[config.train.dtype]
        seed = config.train.seed
        bcfg = config.backbone_config(num_classes)
        backbone = Backbone(bcfg, init_stream(seed, "backbone"), dtype)
        shallow = [ShallowMap(bcfg.num_patches, bcfg.embed_dim, num_classes, config.model.shallow_hidden,
                              init_stream(seed, "shallow", k), dtype) for k in range(bcfg.tap_levels)]
        dcfg = config.denoiser_config(num_classes)
        denoisers = [Denoiser(dcfg, init_stream(seed, "denoiser", k), dtype) for k in range(bcfg.tap_levels)]
        names = tuple(class_names) or tuple(str(c) for c in range(num_classes))
        return cls(config, num_classes, names, backbone, shallow, denoisers, config.schedule())

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.config.train.dtype]

    @property
    def K(self) -> int:
        return len(self.shallow)

    def config_hash(self) -> str:
        return self.config.model_hash(self.num_classes)

    # -- parameter fingerprints --------------------------------------------

    def stage_digest(self, stage: str) -> str:
        modules = {"backbone": [self.backbone], "shallow": self.shallow, "diffusion": self.denoisers}[stage]
        return tensor_digest(t for m in modules for t in m.state_dict().values())

    def digests(self) -> dict[str, str]:
        return {s: self.stage_digest(s) for s in STAGES}

    # -- inference ------------------------------------------------------------

    @torch.no_grad()
    def latent(self, x: torch.Tensor, levels: int | None = None) -> list[torch.Tensor]:
        """Intermediate predictions ``z_1..z_K`` for a batch of normalised images."""
        levels = self.K if levels is None else levels
        self.backbone.eval()
        taps = self.backbone.taps(x, levels)
        return [self.shallow[k](taps[k]) for k in range(levels)]

    @torch.no_grad()
    def backbone_proba(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)[0]

    @torch.no_grad()
    def candidate_groups(self, x: torch.Tensor, indices: Sequence[int], M: int, seed: int,
                         levels: int | None = None) -> list[list[CandidateGroup]]:
        """M reverse-chain samples per level for every image.

        Chain (i, k, m) draws its noise from stream ``("chain", i, k, m)`` under
        ``seed``, where i is the instance's index in its split, so the noise
        an instance sees does not depend on batch composition.
        """
        levels = self.K if levels is None else levels
        B = x.shape[0]
        zs = self.latent(x, levels)
        groups: list[list[CandidateGroup]] = [[] for _ in range(B)]
        for k in range(levels):
            xr = x.repeat_interleave(M, dim=0)
            zr = zs[k].repeat_interleave(M, dim=0)
            streams = [RngStream(seed, stream_id("chain", int(i), k, m)) for i in indices for m in range(M)]
            samples = sample_chain(self.denoisers[k], xr, zr, self.schedule, streams)
            samples = samples.to(torch.float64).numpy().reshape(B, M, -1)
            for b in range(B):
                groups[b].append(CandidateGroup(k + 1, samples[b]))
        return groups

    def predict(self, x: torch.Tensor, indices: Sequence[int] | None = None, M: int | None = None,
                seed: int | None = None, levels: int | None = None) -> list[EnsembleOutput]:
        M = self.config.ensemble.M if M is None else M
        seed = self.config.infer.seed if seed is None else seed
        indices = range(x.shape[0]) if indices is None else indices
        groups = self.candidate_groups(x, list(indices), M, seed, levels)
        return [combine(g, self.config.ensemble.temperature) for g in groups]


def load_dataset(config: ExperimentConfig) -> Dataset:
    d = config.data
    dtype = DTYPES[config.train.dtype]
    if d.source == "synthetic":
        return gen_synthetic(d.n, d.image_size, d.class_sep, RngStream(d.seed, stream_id("data")), d.channels, dtype)
    return load_dir(d.path, d.image_size, d.channels, dtype)


def dataset_splits(config: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Raw (unnormalised) train/val/test splits, deterministic in the data seed."""
    full = load_dataset(config)
    return split(full, config.data.fractions, RngStream(config.data.seed, stream_id("split")))


def perturb_batch(spec: P.PerturbSpec | None, x: torch.Tensor, y: torch.Tensor, indices: Sequence[int],
                  pipe: Pipeline, seed: int) -> torch.Tensor:
    """Apply a perturbation to normalised images; gaussian noise uses stream ``("perturb", i)`` per image."""
    if spec is None:
        return x
    if spec.kind == "gaussian":
        return torch.stack([P.gaussian_noise(x[b], spec.strength, RngStream(seed, stream_id("perturb", int(i))))
                            for b, i in enumerate(indices)])
    with torch.enable_grad():
        return P.apply(spec, x, y, pipe.backbone, patch_size=pipe.backbone.cfg.patch_size)


def run_inference(pipe: Pipeline, data: Dataset, spec: P.PerturbSpec | None = None,
                  batch_size: int | None = None, keep_raw: bool = False) -> list[dict]:
    """Prediction records for a normalised dataset: ensemble class, proba, PIW, PV, backbone class."""
    cfg = pipe.config
    batch_size = batch_size or cfg.infer.batch_size
    seed = cfg.infer.seed
    rows: list[dict] = []
    targets = data.targets
    for start in range(0, len(data), batch_size):
        idx = list(range(start, min(start + batch_size, len(data))))
        x = perturb_batch(spec, data.images[idx], data.labels[idx], idx, pipe, seed)
        outs = pipe.predict(x, idx)
        backbone_cls = pipe.backbone_proba(x).argmax(dim=1).tolist()
        for i, out, bc in zip(idx, outs, backbone_cls):
            rec = {"index": i, "true": int(targets[i]), **out.to_record(), "backbone_class": int(bc)}
            if keep_raw:
                rec["raw"] = out.raw.tolist()
            rows.append(rec)
    return rows


def summarize(rows: Sequence[dict]) -> dict:
    from .metrics import accuracy, ece10, records_from_predictions

    recs = records_from_predictions(rows)
    return {
        "n": len(rows),
        "accuracy": accuracy(recs),
        "ece10": ece10(recs),
        "backbone_accuracy": float(np.mean([r["backbone_class"] == r["true"] for r in rows])),
    }
