"""Storage accounting for networks whose layers are replaced by inducing-weight
layers, with a static ResNet-18 shape manifest."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import EmptyInput

DENSE_RESNET18_CIFAR100 = 11_220_132


@dataclass(frozen=True)
class ManifestEntry:
    """One weight matrix.  Convolutions appear flattened: ``d_in = C_in k k``.

    ``kind`` is ``"fidgp"`` (converted) or ``"dense"``.  ``inducing`` pins the
    inducing size for this entry instead of the sweep value; ``extra`` counts
    bias and normalization parameters attached to the layer.
    """

    d_in: int
    d_out: int
    kind: str = "fidgp"
    inducing: tuple | None = None
    extra: int = 0
    name: str = ""


@dataclass
class CountReport:
    transforms: int = 0
    variational: int = 0
    matheron_extra: int = 0
    dense: int = 0
    bias_norm: int = 0
    flow: int = 0
    dense_reference: int = 0
    per_layer: list = field(default_factory=list)

    @property
    def total(self):
        """Everything except flow parameters (reported on their own)."""
        return self.transforms + self.variational + self.matheron_extra + self.dense + self.bias_norm

    @property
    def total_with_flow(self):
        return self.total + self.flow

    def compression(self, reference=None):
        ref = reference or self.dense_reference
        return 1.0 - self.total / ref


def layer_storage(d_in, d_out, m_in, m_out, mode="reparam", k_samples=1):
    """Per-layer storage: ``d_in M_in + d_out M_out + M_in``, plus ``K M_in M_out``
    for Matheron sampling."""
    base = d_in * m_in + d_out * m_out + m_in
    extra = k_samples * m_in * m_out if mode == "matheron" else 0
    return base, extra


def flow_param_count(dim, depth=4, hidden=32):
    """Weights and biases of the coupling conditioners for a flow on ``dim``."""
    total = 0
    half = dim // 2
    for k in range(depth):
        n_c, n_t = (half, dim - half) if k % 2 == 0 else (dim - half, half)
        # scale and shift nets share the same shape
        total += 2 * ((n_c * hidden + hidden) + (hidden * n_t + n_t))
    return total


def compressed_param_count(manifest, m_in, m_out, mode="reparam", k_samples=1, include_flow=False,
                           flow_depth=4, flow_hidden=32):
    if not manifest:
        raise EmptyInput("manifest is empty")
    rep = CountReport()
    for e in manifest:
        rep.dense_reference += e.d_in * e.d_out + e.extra
        rep.bias_norm += e.extra
        if e.kind == "dense":
            rep.dense += e.d_in * e.d_out
            rep.per_layer.append((e.name, e.d_in * e.d_out + e.extra))
            continue
        if e.kind != "fidgp":
            raise ValueError(f"unknown manifest kind {e.kind!r}")
        mi, mo = e.inducing or (m_in, m_out)
        base, extra = layer_storage(e.d_in, e.d_out, mi, mo, mode, k_samples)
        var = 2 * mi * mo  # diagonal q: mean and log-std
        fl = flow_param_count(mi * mo, flow_depth, flow_hidden) if include_flow else 0
        rep.transforms += base
        rep.matheron_extra += extra
        rep.variational += var
        rep.flow += fl
        rep.per_layer.append((e.name, base + extra + var + e.extra))
    return rep


def _block(c_in, c_out, downsample):
    layers = [
        ManifestEntry(c_in * 9, c_out, extra=2 * c_out),
        ManifestEntry(c_out * 9, c_out, extra=2 * c_out),
    ]
    if downsample:
        layers.append(ManifestEntry(c_in, c_out, extra=2 * c_out))
    return layers


def resnet18_manifest(num_classes=100, fc_inducing=(128, None)):
    """CIFAR ResNet-18: 3x3 stem, four stages of two basic blocks, and a
    linear classifier.  Batch-norm scale/shift parameters are attached to the
    convolution they follow; convolutions carry no bias.

    The classifier uses its own inducing size ``M_in x num_classes`` rather
    than the sweep value.
    """
    m = [ManifestEntry(27, 64, extra=128, name="conv1")]
    widths = [64, 128, 256, 512]
    c_in = 64
    for s, c_out in enumerate(widths):
        for b in range(2):
            down = b == 0 and c_in != c_out
            for k, e in enumerate(_block(c_in, c_out, down)):
                m.append(ManifestEntry(e.d_in, e.d_out, extra=e.extra, name=f"layer{s + 1}.{b}.{k}"))
            c_in = c_out
    fc_in = fc_inducing[0]
    fc_out = fc_inducing[1] or num_classes
    m.append(ManifestEntry(512, num_classes, inducing=(fc_in, fc_out), extra=num_classes, name="fc"))
    return m


MANIFESTS = {"resnet18": resnet18_manifest}
