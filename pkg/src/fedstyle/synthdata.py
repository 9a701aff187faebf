"""Synthetic multi-domain segmentation world.

A world has one labeled source domain and G latent target domains. Each
domain carries a planted style signature (per-channel color cast plus a
low-frequency illumination gradient) so that the domain identity lives
exactly in the low-frequency amplitude window the style extractor reads.
Clients draw all their images from a single latent domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "StyleSignature",
    "DomainSpec",
    "SplitSpec",
    "WorldConfig",
    "World",
    "ClientData",
    "gen_image",
    "gen_world",
    "default_domains",
]


@dataclass(frozen=True)
class StyleSignature:
    """Low-frequency domain fingerprint: additive cast + multiplicative ramp."""

    cast: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gradient_strength: float = 0.0
    gradient_axis: int = 0  # 0: vertical ramp, 1: horizontal ramp


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    signature: StyleSignature
    noise_sigma: float
    class_palette: dict[int, tuple[float, float, float]]


@dataclass(frozen=True)
class SplitSpec:
    clients_per_domain: int
    images_per_client: tuple[int, int]  # inclusive range [lo, hi]
    image_size: tuple[int, int] = (32, 32)
    num_classes: int = 5

    def __post_init__(self) -> None:
        lo, hi = self.images_per_client
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid images_per_client range [{lo}, {hi}]")


# Palette chosen so that domain casts push class colors toward each other:
# the source-only model has a genuine domain gap to close.
DEFAULT_PALETTE: dict[int, tuple[float, float, float]] = {
    0: (0.35, 0.35, 0.35),
    1: (0.62, 0.40, 0.30),
    2: (0.30, 0.60, 0.38),
    3: (0.32, 0.40, 0.64),
    4: (0.58, 0.58, 0.30),
}

# Distinct, well-separated casts for up to six latent domains.
_DOMAIN_CASTS = [
    (0.22, -0.06, -0.10),
    (-0.10, 0.20, -0.08),
    (-0.08, -0.10, 0.24),
    (0.16, 0.16, -0.12),
    (-0.14, 0.10, 0.16),
    (0.12, -0.14, 0.12),
]
_DOMAIN_GRADIENTS = [0.30, -0.25, 0.20, -0.30, 0.25, -0.20]


def default_domains(
    g: int, noise_sigma: float = 0.02, palette: dict[int, tuple[float, float, float]] | None = None
) -> list[DomainSpec]:
    """G target domains with preset pairwise-separated signatures."""
    if g < 1 or g > len(_DOMAIN_CASTS):
        raise ValueError(f"supported domain counts are 1..{len(_DOMAIN_CASTS)}, got {g}")
    palette = palette or DEFAULT_PALETTE
    return [
        DomainSpec(
            domain_id=f"domain{i}",
            signature=StyleSignature(
                cast=_DOMAIN_CASTS[i],
                gradient_strength=_DOMAIN_GRADIENTS[i],
                gradient_axis=i % 2,
            ),
            noise_sigma=noise_sigma,
            class_palette=palette,
        )
        for i in range(g)
    ]


def source_domain(
    noise_sigma: float = 0.02, palette: dict[int, tuple[float, float, float]] | None = None
) -> DomainSpec:
    """Neutral-style labeled source domain (no cast, no gradient)."""
    return DomainSpec(
        domain_id="source",
        signature=StyleSignature(),
        noise_sigma=noise_sigma,
        class_palette=palette or DEFAULT_PALETTE,
    )


def gen_image(
    spec: DomainSpec, seed: int | np.random.Generator, size: tuple[int, int] = (32, 32)
) -> tuple[np.ndarray, np.ndarray]:
    """Render one (image, label) pair: random rectangles and discs on background.

    Labels are exact by construction; the domain signature is applied after
    painting, so it moves intensities but never label boundaries.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h, w = size
    classes = sorted(spec.class_palette)
    shape_classes = classes[1:]
    labels = np.full((h, w), classes[0], dtype=np.int64)

    n_rects = int(rng.integers(2, 6))
    n_discs = int(rng.integers(1, 4))
    for _ in range(n_rects):
        cls = int(rng.choice(shape_classes))
        y0 = int(rng.integers(0, h - 3))
        x0 = int(rng.integers(0, w - 3))
        y1 = int(rng.integers(y0 + 2, min(y0 + h // 2, h) + 1))
        x1 = int(rng.integers(x0 + 2, min(x0 + w // 2, w) + 1))
        labels[y0:y1, x0:x1] = cls
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_discs):
        cls = int(rng.choice(shape_classes))
        cy = int(rng.integers(2, h - 2))
        cx = int(rng.integers(2, w - 2))
        rad = int(rng.integers(2, max(3, min(h, w) // 4)))
        labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad**2] = cls

    img = np.zeros((h, w, 3))
    for cls in classes:
        img[labels == cls] = spec.class_palette[cls]

    sig = spec.signature
    if sig.gradient_strength != 0.0:
        axis_len = h if sig.gradient_axis == 0 else w
        ramp = np.linspace(-0.5, 0.5, axis_len) * sig.gradient_strength + 1.0
        field = ramp[:, None] if sig.gradient_axis == 0 else ramp[None, :]
        img = img * field[:, :, None]
    img = img + np.asarray(sig.cast)[None, None, :]
    if spec.noise_sigma > 0.0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0), labels


@dataclass
class ClientData:
    client_id: str
    domain_id: str
    images: list[np.ndarray]


@dataclass
class LabeledSet:
    """Labeled (image, labels) pairs with an access counter for isolation tests."""

    items: list[tuple[np.ndarray, np.ndarray]]
    access_count: int = 0

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        self.access_count += 1
        return self.items[i]


@dataclass
class World:
    source: LabeledSet
    clients: list[ClientData]
    test: list[tuple[np.ndarray, np.ndarray, str]]  # (image, labels, domain_id)
    domains: list[DomainSpec]
    truth: dict[str, str] = field(default_factory=dict)  # client_id -> domain_id


@dataclass(frozen=True)
class WorldConfig:
    """Everything needed to regenerate a world deterministically."""

    num_domains: int = 3
    clients_per_domain: int = 10
    images_per_client: tuple[int, int] = (8, 24)
    image_size: tuple[int, int] = (32, 32)
    num_classes: int = 5
    source_size: int = 60
    test_per_domain: int = 12
    noise_sigma: float = 0.02
    separation: float = 280.0  # required pairwise style distance between domains


def gen_world(
    domains: list[DomainSpec],
    split: SplitSpec,
    source_size: int,
    seed: int,
    test_per_domain: int = 12,
    source_noise: float | None = None,
) -> World:
    """Source set, per-domain clients with uniform image counts, stratified test set."""
    if not domains:
        raise ValueError("at least one target domain is required")
    lo, hi = split.images_per_client
    if source_size < 1 or test_per_domain < 1:
        raise ValueError("source_size and test_per_domain must be >= 1")

    rng = np.random.default_rng(seed)
    src_spec = source_domain(
        noise_sigma=domains[0].noise_sigma if source_noise is None else source_noise,
        palette=domains[0].class_palette,
    )
    source = LabeledSet(
        [gen_image(src_spec, rng, split.image_size) for _ in range(source_size)]
    )

    clients: list[ClientData] = []
    truth: dict[str, str] = {}
    for spec in domains:
        for j in range(split.clients_per_domain):
            cid = f"{spec.domain_id}_client{j}"
            count = int(rng.integers(lo, hi + 1))
            images = [gen_image(spec, rng, split.image_size)[0] for _ in range(count)]
            clients.append(ClientData(client_id=cid, domain_id=spec.domain_id, images=images))
            truth[cid] = spec.domain_id

    test = []
    for spec in domains:
        for _ in range(test_per_domain):
            img, lab = gen_image(spec, rng, split.image_size)
            test.append((img, lab, spec.domain_id))

    return World(source=source, clients=clients, test=test, domains=domains, truth=truth)


def build_world(cfg: WorldConfig, seed: int) -> World:
    """Convenience builder from a WorldConfig."""
    domains = default_domains(cfg.num_domains, noise_sigma=cfg.noise_sigma)
    split = SplitSpec(
        clients_per_domain=cfg.clients_per_domain,
        images_per_client=cfg.images_per_client,
        image_size=cfg.image_size,
        num_classes=cfg.num_classes,
    )
    return gen_world(
        domains, split, cfg.source_size, seed, test_per_domain=cfg.test_per_domain
    )
