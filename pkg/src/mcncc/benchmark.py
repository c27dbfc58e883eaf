"""Seeded synthetic cross-domain retrieval benchmark.

Shared latent patterns are rendered into two domains: "reference"
items (lightly blurred, mild clutter) play the database role and
"probe" patches (heavier blur, stronger clutter, per-patch brightness
and contrast jitter) play the query role.  Feature maps are rectified
oriented-gradient responses plus a few pure-noise channels whose
amplitude varies per item; the noise channels are what weight learning
can prune.

Everything is derived from one integer seed, so runs are reproducible
and seed sweeps give independent replicates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .correlate import AlignmentConfig, ChannelWeights, CorrelationScorer
from .evaluation import RetrievalItem, RetrievalReport, retrieval_run
from .learn import PairBatch, SiameseModel, TrainConfig, train
from .normalize import NormalizationScheme
from .tensor import FeatureMap, extract_patch
from .whiten import apply_projection, fit_cca

REFERENCE_DOMAIN = "reference"
PROBE_DOMAIN = "probe"


@dataclass(frozen=True)
class BenchmarkConfig:
    n_groups: int = 8  # retrieval (test) groups
    train_groups: int = 6  # extra groups used only for training pairs
    items_per_group: int = 2  # reference renders per group (database side)
    queries_per_group: int = 2
    train_pairs_per_group: int = 2
    image_size: int = 48
    patch_size: int = 26
    orientations: int = 4
    noise_channels: int = 4
    translation_stride: int = 1
    # Rendering knobs; probe jitter is deliberately harsher.
    latent_smoothness: float = 2.2
    reference_blur: float = 0.8
    probe_blur: float = 1.4
    reference_contrast: tuple = (0.7, 1.5)
    probe_contrast: tuple = (0.5, 2.0)
    reference_clutter: tuple = (0.1, 0.6)
    probe_clutter: tuple = (0.2, 0.8)
    probe_occlusion: tuple = (0.1, 0.4)  # fraction of the patch clobbered
    channel_gain: tuple = (0.6, 1.6)  # per-item, per-channel energy jitter
    # Noise channels are spatially smooth: few effective samples per
    # patch, so their per-item correlation jitters strongly no matter
    # how they are normalized.  Amplitude kept small relative to signal
    # channels (~0.1 std) so volume statistics are not dominated.
    noise_amp: tuple = (0.02, 0.05)
    noise_smoothness: float = 3.5
    # Per-item feature baselines: a shared offset (any centering removes
    # it) plus per-channel spread (only per-channel centering does).
    offset_shared: tuple = (0.0, 1.2)
    offset_channel: tuple = (0.0, 0.15)


@dataclass(frozen=True)
class BenchmarkData:
    database: list  # RetrievalItem, reference domain (test groups)
    queries: list  # RetrievalItem, probe domain patches (test groups)
    train_pairs: PairBatch  # aligned patch pairs from the train groups
    config: BenchmarkConfig
    seed: int


def _smooth_noise(rng, shape, sigma):
    return gaussian_filter(rng.standard_normal(shape), sigma, mode="nearest")


def _latent_pattern(rng, size, smoothness):
    field = _smooth_noise(rng, (size, size), smoothness)
    return (field > 0).astype(np.float64)


def _oriented_responses(image, orientations, blur=1.0):
    """Rectified directional-derivative bank, one channel per orientation."""
    smoothed = gaussian_filter(image, blur, mode="nearest")
    gy, gx = np.gradient(smoothed)
    channels = []
    for k in range(orientations):
        theta = np.pi * k / orientations
        channels.append(np.abs(np.cos(theta) * gx + np.sin(theta) * gy))
    return np.stack(channels)


def _render(rng, latent, cfg, domain):
    if domain == REFERENCE_DOMAIN:
        blur, contrast, clutter = cfg.reference_blur, cfg.reference_contrast, cfg.reference_clutter
    else:
        blur, contrast, clutter = cfg.probe_blur, cfg.probe_contrast, cfg.probe_clutter
    gain = rng.uniform(*contrast)
    clutter_amp = rng.uniform(*clutter)
    img = gain * gaussian_filter(latent, blur, mode="nearest")
    img = img + clutter_amp * _smooth_noise(rng, latent.shape, 1.0)
    img = img + rng.uniform(-0.5, 0.5)  # brightness offset
    return img


def _featurize(rng, image, cfg, domain_tag):
    responses = _oriented_responses(image, cfg.orientations)
    gains = rng.uniform(*cfg.channel_gain, size=cfg.orientations)
    responses = responses * gains[:, None, None]
    extras = []
    for _ in range(cfg.noise_channels):
        amp = rng.uniform(*cfg.noise_amp)
        extras.append(amp * np.abs(_smooth_noise(rng, image.shape, cfg.noise_smoothness)))
    values = np.concatenate([responses, np.stack(extras)]) if extras else responses
    shared = rng.uniform(*cfg.offset_shared)
    per_channel = rng.uniform(*cfg.offset_channel, size=values.shape[0])
    values = values + shared + per_channel[:, None, None]
    return FeatureMap(values, domain_tag=domain_tag)


def _probe_patch(rng, img, top, left, cfg):
    window = img[top : top + cfg.patch_size, left : left + cfg.patch_size]
    # Per-patch photometric jitter on top of the domain rendering.
    window = rng.uniform(*cfg.probe_contrast) * window + rng.uniform(-0.5, 0.5)
    # Partial occlusion: a clutter block over a random sub-rectangle.
    frac = rng.uniform(*cfg.probe_occlusion)
    if frac > 0:
        ph, pw = window.shape
        oh = max(1, int(round(ph * np.sqrt(frac))))
        ow = max(1, int(round(pw * np.sqrt(frac))))
        oy = int(rng.integers(ph - oh + 1))
        ox = int(rng.integers(pw - ow + 1))
        window = window.copy()
        window[oy : oy + oh, ox : ox + ow] = (
            0.5 * _smooth_noise(rng, (oh, ow), 1.0) + window.mean()
        )
    return window


def generate_benchmark(seed: int, cfg: BenchmarkConfig | None = None) -> BenchmarkData:
    """Build database items, probe-patch queries, and aligned training pairs.

    Training pairs come from groups disjoint from the retrieval groups,
    so retrieval quality of a trained model is measured held-out.
    """
    cfg = cfg or BenchmarkConfig()
    rng = np.random.default_rng(seed)
    margin = cfg.image_size - cfg.patch_size

    latents = [
        _latent_pattern(rng, cfg.image_size, cfg.latent_smoothness)
        for _ in range(cfg.n_groups)
    ]

    database = []
    for g, latent in enumerate(latents):
        group = f"g{g:02d}"
        for j in range(cfg.items_per_group):
            img = _render(rng, latent, cfg, REFERENCE_DOMAIN)
            fmap = _featurize(rng, img, cfg, REFERENCE_DOMAIN)
            database.append(RetrievalItem(f"{group}-ref{j}", group, fmap))

    queries = []
    for g, latent in enumerate(latents):
        group = f"g{g:02d}"
        for j in range(cfg.queries_per_group):
            img = _render(rng, latent, cfg, PROBE_DOMAIN)
            top = int(rng.integers(margin + 1))
            left = int(rng.integers(margin + 1))
            fmap = _featurize(rng, _probe_patch(rng, img, top, left, cfg), cfg, PROBE_DOMAIN)
            queries.append(RetrievalItem(f"{group}-probe{j}", group, fmap))

    # Training pairs from their own latents: positive = same group and
    # same latent window in both domains; negative = different groups.
    train_latents = [
        _latent_pattern(rng, cfg.image_size, cfg.latent_smoothness)
        for _ in range(cfg.train_groups)
    ]
    positives = []
    for g, latent in enumerate(train_latents):
        for _ in range(cfg.train_pairs_per_group):
            ref_img = _render(rng, latent, cfg, REFERENCE_DOMAIN)
            probe_img = _render(rng, latent, cfg, PROBE_DOMAIN)
            top = int(rng.integers(margin + 1))
            left = int(rng.integers(margin + 1))
            ref = _featurize(rng, ref_img, cfg, REFERENCE_DOMAIN)
            ref_patch = extract_patch(ref, top, left, cfg.patch_size, cfg.patch_size)
            probe = _featurize(rng, _probe_patch(rng, probe_img, top, left, cfg), cfg, PROBE_DOMAIN)
            positives.append((g, ref_patch, probe))
    pairs = [(x, y, 1) for _, x, y in positives]
    for i, (g, ref_patch, _) in enumerate(positives):
        for _ in range(100):
            j = int(rng.integers(len(positives)))
            if positives[j][0] != g:
                pairs.append((ref_patch, positives[j][2], -1))
                break

    return BenchmarkData(
        database=database,
        queries=queries,
        train_pairs=PairBatch(tuple(pairs)),
        config=cfg,
        seed=seed,
    )


def benchmark_map(
    data: BenchmarkData,
    scheme: NormalizationScheme,
    weights: ChannelWeights | None = None,
    proj_ref=None,
    proj_probe=None,
    workers: int = 1,
) -> RetrievalReport:
    """Mean AP of a scoring policy on the benchmark retrieval task."""
    scorer = CorrelationScorer(scheme=scheme, weights=weights)
    cfg = AlignmentConfig(
        translation_stride=data.config.translation_stride, min_overlap_fraction=1.0
    )
    database = data.database
    queries = data.queries
    if proj_ref is not None:
        database = [
            RetrievalItem(it.item_id, it.group_id, apply_projection(it.fmap, proj_ref))
            for it in database
        ]
    if proj_probe is not None:
        queries = [
            RetrievalItem(it.item_id, it.group_id, apply_projection(it.fmap, proj_probe))
            for it in queries
        ]
    return retrieval_run(queries, database, cfg, scorer, exclude_self=False, workers=workers)


def fit_benchmark_cca(train_pairs: PairBatch, k: int, ridge: float | None = None):
    """CCA projections from pixel-aligned positive training pairs."""
    ref_rows, probe_rows = [], []
    for x, y, z in train_pairs:
        if z != 1:
            continue
        ref_rows.append(x.values.reshape(x.channels, -1).T)
        probe_rows.append(y.values.reshape(y.channels, -1).T)
    samples_x = np.concatenate(ref_rows)
    samples_y = np.concatenate(probe_rows)
    return fit_cca(
        samples_x,
        samples_y,
        k,
        ridge=ridge,
        domain_tag_x=REFERENCE_DOMAIN,
        domain_tag_y=PROBE_DOMAIN,
    )


def train_benchmark_model(
    data: BenchmarkData,
    regime: str,
    alpha: float = 1.0,
    beta: float = 1.0,
    cca_k: int | None = None,
    train_cfg: TrainConfig | None = None,
) -> SiameseModel:
    """Train one rung of the model ladder on the benchmark pairs.

    Regimes: "weights" learns channel weights over raw features;
    "cca-weights" fixes CCA projections and learns weights on top;
    "joint" fine-tunes projections and weights together from CCA init.
    """
    channels = data.database[0].fmap.channels
    cfg = train_cfg or TrainConfig(
        learning_rate=0.02, epochs=60, batch_size=8, seed=data.seed
    )
    if regime == "weights":
        model = SiameseModel.initial(channels, alpha=alpha, beta=beta)
        cfg = replace(cfg, freeze_projections=True)
    elif regime in ("cca-weights", "joint"):
        k = cca_k or channels  # square projections by default
        cca = fit_benchmark_cca(data.train_pairs, k)
        model = SiameseModel(
            proj_x=cca.proj_x,
            proj_y=cca.proj_y,
            weights=ChannelWeights.uniform(k),
            alpha=alpha,
            beta=beta,
        )
        if regime == "cca-weights":
            cfg = replace(cfg, freeze_projections=True)
    else:
        raise ValueError(f"unknown regime {regime!r}")
    return train(model, data.train_pairs, cfg)
