"""Network building blocks and the three-stage artifact reduction pipeline.

Stage one restores the traced sinogram region with an encoder-decoder
whose bottleneck mixes a local conv branch with a global spectral branch
(1x1 convolution over the 2-d Fourier coefficients, so every output pixel
sees every input pixel). Stage two post-processes the corrupted
reconstruction directly in image space. Stage three fuses both images
through an encoder-decoder with spectral skip connections and a residual
output. All stages train jointly.
"""

import numpy as np

from . import fftops, ops, qnt
from .geometry import FanBeamGeometry
from .losses import normalize_mu
from .projector import fbp_nchw
from .tensor import Tensor

SINO_MODES = ("completion", "enhance_trace", "enhance_projection")


class Module:
    """Minimal composable layer base with named state for checkpoints."""

    def children(self):
        return []

    def local_params(self):
        return []

    def local_buffers(self):
        return []

    def named_params(self, prefix=""):
        out = list((prefix + n, t) for n, t in self.local_params())
        for name, child in self.children():
            out.extend(child.named_params(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix=""):
        out = list((prefix + n, a) for n, a in self.local_buffers())
        for name, child in self.children():
            out.extend(child.named_buffers(f"{prefix}{name}."))
        return out

    def params(self):
        return [t for _, t in self.named_params()]

    def state_arrays(self):
        state = {n: t.data for n, t in self.named_params()}
        for n, a in self.named_buffers():
            state[n] = a
        return state

    def load_state(self, state, prefix=""):
        for n, t in self.local_params():
            arr = np.asarray(state[prefix + n])
            if arr.shape != t.data.shape:
                raise ValueError(f"{prefix}{n}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)
        for n, _ in self.local_buffers():
            arr = np.asarray(state[prefix + n])
            setattr(self, n, arr.astype(np.float32, copy=True))
        for name, child in self.children():
            child.load_state(state, f"{prefix}{name}.")

    def param_count(self):
        return sum(t.data.size for _, t in self.named_params())

    def cast(self, dtype):
        """In-place dtype cast of all parameters and buffers (for probes)."""
        for _, t in self.named_params():
            t.data = t.data.astype(dtype)
        for n, _ in self.local_buffers():
            setattr(self, n, getattr(self, n).astype(dtype))
        for _, child in self.children():
            child.cast(dtype)
        return self


class Conv(Module):
    def __init__(self, rng, cin, cout, ksize=3, stride=1, bias=True, zero_init=False):
        if zero_init:
            w = np.zeros((cout, cin, ksize, ksize), np.float32)
        else:
            std = np.sqrt(2.0 / (cin * ksize * ksize))
            w = rng.normal(0.0, std, (cout, cin, ksize, ksize)).astype(np.float32)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout, np.float32), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = ksize // 2

    def local_params(self):
        out = [("w", self.w)]
        if self.b is not None:
            out.append(("b", self.b))
        return out

    def __call__(self, x):
        return ops.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class BatchNorm(Module):
    def __init__(self, ch):
        self.gamma = Tensor(np.ones(ch, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(ch, np.float32), requires_grad=True)
        self.running_mean = np.zeros(ch, np.float32)
        self.running_var = np.ones(ch, np.float32)

    def local_params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def local_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def __call__(self, x, training, update_running=True):
        return ops.batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=training,
            update_running=update_running,
        )


class ConvBNRelu(Module):
    """3x3 conv (no bias, BN absorbs it) -> batch norm -> relu."""

    def __init__(self, rng, cin, cout, stride=1):
        self.conv = Conv(rng, cin, cout, 3, stride=stride, bias=False)
        self.bn = BatchNorm(cout)

    def children(self):
        return [("conv", self.conv), ("bn", self.bn)]

    def __call__(self, x, training):
        return ops.relu(self.bn(self.conv(x), training))


class FourierUnit(Module):
    """Pointwise mixing of 2-d Fourier coefficients.

    real/imag parts are stacked into channels, mixed by a 1x1 conv
    (optionally BN + relu), and transformed back. With ``identity=True``
    the conv is the exact identity and BN/relu are skipped, making the
    whole unit a spectral round trip.
    """

    def __init__(self, rng, ch, use_bn=True, use_act=True, identity=False):
        self.use_bn = use_bn and not identity
        self.use_act = use_act and not identity
        self.conv = Conv(rng, 2 * ch, 2 * ch, 1, bias=False)
        if identity:
            self.conv.w.data = np.eye(2 * ch, dtype=np.float32).reshape(2 * ch, 2 * ch, 1, 1)
        self.bn = BatchNorm(2 * ch) if self.use_bn else None

    def children(self):
        out = [("conv", self.conv)]
        if self.bn is not None:
            out.append(("bn", self.bn))
        return out

    def __call__(self, x, training):
        spec = fftops.rfft2(x)
        h = self.conv(fftops.complex2real(spec))
        if self.bn is not None:
            h = self.bn(h, training)
        if self.use_act:
            h = ops.relu(h)
        return fftops.irfft2(fftops.real2complex(h, spec.spatial_shape))


class SpectralBlock(Module):
    """Two-branch block: local 3x3 convs plus a global spectral branch.

    Channels split local/global by ``global_ratio``; the four exchange
    paths are summed pairwise, normalized and activated per branch.
    """

    def __init__(self, rng, ch, global_ratio=0.75, fu_bn=True, fu_act=True):
        self.cg = int(ch * global_ratio)
        self.cl = ch - self.cg
        if self.cl <= 0 or self.cg <= 0:
            raise ValueError(f"channel split failed for width {ch}, ratio {global_ratio}")
        self.l2l = Conv(rng, self.cl, self.cl, 3, bias=False)
        self.g2l = Conv(rng, self.cg, self.cl, 3, bias=False)
        self.l2g = Conv(rng, self.cl, self.cg, 3, bias=False)
        self.fourier = FourierUnit(rng, self.cg, use_bn=fu_bn, use_act=fu_act)
        self.bn_l = BatchNorm(self.cl)
        self.bn_g = BatchNorm(self.cg)

    def children(self):
        return [
            ("l2l", self.l2l),
            ("g2l", self.g2l),
            ("l2g", self.l2g),
            ("fourier", self.fourier),
            ("bn_l", self.bn_l),
            ("bn_g", self.bn_g),
        ]

    def __call__(self, x, training):
        xl = ops.slice_channels(x, 0, self.cl)
        xg = ops.slice_channels(x, self.cl, self.cl + self.cg)
        yl = ops.relu(self.bn_l(ops.add(self.l2l(xl), self.g2l(xg)), training))
        yg = ops.relu(self.bn_g(ops.add(self.l2g(xl), self.fourier(xg, training)), training))
        return ops.concat([yl, yg], axis=1)


class ConvPairBlock(Module):
    """Conventional stand-in for a spectral block: C -> mid -> C convs."""

    def __init__(self, rng, ch, mid):
        self.a = ConvBNRelu(rng, ch, mid)
        self.b = ConvBNRelu(rng, mid, ch)

    def children(self):
        return [("a", self.a), ("b", self.b)]

    def __call__(self, x, training):
        return self.b(self.a(x, training), training)


class FourierSkip(Module):
    """Skip-connection processor: local conv branch + spectral branch.

    The spectral branch is conv1x1 + relu on Fourier coefficients with no
    normalization, added to the conv branch output.
    """

    def __init__(self, rng, ch):
        self.local = ConvBNRelu(rng, ch, ch)
        self.spectral = FourierUnit(rng, ch, use_bn=False, use_act=True)

    def children(self):
        return [("local", self.local), ("spectral", self.spectral)]

    def __call__(self, x, training):
        return ops.add(self.local(x, training), self.spectral(x, training))


class EncoderDecoder(Module):
    """Depth-2 U-shaped net with a configurable bottleneck and skips.

    bottleneck: "spectral" (local+global blocks), "conv_pair" (parameter
    parity stand-in, needs ``mid``), or "plain" (width-preserving convs).
    skips: "plain" (pass encoder features through) or "fourier".
    The output head is zero-initialized so the net starts as the zero map.
    """

    def __init__(
        self,
        rng,
        in_ch,
        width=16,
        bottleneck="spectral",
        n_bottleneck=3,
        skips="plain",
        mid=None,
        fu_bn=True,
        fu_act=True,
        out_ch=1,
        zero_head=True,
    ):
        w = width
        self.head = ConvBNRelu(rng, in_ch, w)
        self.down1 = ConvBNRelu(rng, w, 2 * w, stride=2)
        self.down2 = ConvBNRelu(rng, 2 * w, 4 * w, stride=2)
        self.blocks = []
        for _ in range(n_bottleneck):
            if bottleneck == "spectral":
                self.blocks.append(SpectralBlock(rng, 4 * w, fu_bn=fu_bn, fu_act=fu_act))
            elif bottleneck == "conv_pair":
                if mid is None:
                    raise ValueError("conv_pair bottleneck needs mid width")
                self.blocks.append(ConvPairBlock(rng, 4 * w, mid))
            elif bottleneck == "plain":
                self.blocks.append(ConvBNRelu(rng, 4 * w, 4 * w))
            else:
                raise ValueError(f"unknown bottleneck {bottleneck!r}")
        if skips == "fourier":
            self.skip1 = FourierSkip(rng, w)
            self.skip2 = FourierSkip(rng, 2 * w)
        elif skips == "plain":
            self.skip1 = self.skip2 = None
        else:
            raise ValueError(f"unknown skips {skips!r}")
        self.up1 = ConvBNRelu(rng, 4 * w + 2 * w, 2 * w)
        self.up2 = ConvBNRelu(rng, 2 * w + w, w)
        self.out = Conv(rng, w, out_ch, 3, zero_init=zero_head)

    def children(self):
        out = [
            ("head", self.head),
            ("down1", self.down1),
            ("down2", self.down2),
        ]
        out.extend((f"block{i}", b) for i, b in enumerate(self.blocks))
        if self.skip1 is not None:
            out.append(("skip1", self.skip1))
            out.append(("skip2", self.skip2))
        out.extend([("up1", self.up1), ("up2", self.up2), ("out", self.out)])
        return out

    def __call__(self, x, training=False):
        e0 = self.head(x, training)
        e1 = self.down1(e0, training)
        e2 = self.down2(e1, training)
        h = e2
        for b in self.blocks:
            h = b(h, training)
        s1 = self.skip2(e1, training) if self.skip2 is not None else e1
        h = ops.crop_hw(ops.upsample_nearest2x(h), *e1.shape[2:])
        h = self.up1(ops.concat([h, s1], axis=1), training)
        s0 = self.skip1(e0, training) if self.skip1 is not None else e0
        h = ops.crop_hw(ops.upsample_nearest2x(h), *e0.shape[2:])
        h = self.up2(ops.concat([h, s0], axis=1), training)
        return self.out(h)


def conv_parity_mid(width=16, in_ch=2, n_bottleneck=3, tol=0.05):
    """Mid width making the conv_pair net match the spectral net's size.

    Integer search over the bottleneck's inner width; raises if nothing
    lands within ``tol`` relative parameter difference.
    """
    rng = np.random.default_rng(0)
    target = EncoderDecoder(rng, in_ch, width, bottleneck="spectral",
                            n_bottleneck=n_bottleneck).param_count()
    best, best_diff = None, None
    for mid in range(1, 8 * width + 1):
        n = EncoderDecoder(rng, in_ch, width, bottleneck="conv_pair",
                           n_bottleneck=n_bottleneck, mid=mid).param_count()
        diff = abs(n - target) / target
        if best_diff is None or diff < best_diff:
            best, best_diff = mid, diff
    if best_diff > tol:
        raise ValueError(f"no conv width within {tol:.0%} of {target} parameters")
    return best


def sino_input(s_mc, trace, mask_proj, mode):
    """Assemble the 2-channel sinogram-net input for one sample.

    completion zeroes traced bins (where() keeps clean bins bit-identical
    and writes +0.0 regardless of the masked value's sign) and passes the
    binary trace; enhance_trace passes the raw sinogram with the trace;
    enhance_projection passes the raw sinogram with the continuous mask
    projection.
    """
    if mode not in SINO_MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {SINO_MODES}")
    s_mc = np.asarray(s_mc)
    m = (np.asarray(trace) > 0).astype(s_mc.dtype)
    if mode == "completion":
        return np.stack([np.where(m > 0, s_mc.dtype.type(0.0), s_mc), m])
    if mode == "enhance_trace":
        return np.stack([s_mc, m])
    return np.stack([s_mc, np.asarray(mask_proj, s_mc.dtype)])


def replace_and_recon(s_r, s_mc, trace, geom):
    """Splice predictions into traced bins only, then reconstruct.

    Gradients flow back into ``s_r`` only through traced bins; clean bins
    come verbatim from the measurement. Returns (image in network units,
    spliced sinogram tensor).
    """
    m = Tensor((np.asarray(trace) > 0).astype(np.float32))
    keep = Tensor(np.asarray(s_mc, np.float32) * (1.0 - m.data))
    spliced = ops.add(ops.mul(s_r, m), keep)
    x = fbp_nchw(spliced, geom)
    return normalize_mu(x), spliced


class Pipeline(Module):
    """Sinogram restoration + image post-processing + fused refinement."""

    def __init__(
        self,
        geom: FanBeamGeometry,
        mode="completion",
        width=16,
        sino_bottleneck="spectral",
        sino_mid=None,
        seed=0,
    ):
        if mode not in SINO_MODES:
            raise ValueError(f"unknown mode {mode!r}, expected one of {SINO_MODES}")
        self.geom = geom
        self.mode = mode
        self.width = width
        self.sino_bottleneck = sino_bottleneck
        self.sino_mid = sino_mid
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.sino_net = EncoderDecoder(
            rng, 2, width, bottleneck=sino_bottleneck, n_bottleneck=3, mid=sino_mid
        )
        self.image_net = EncoderDecoder(rng, 1, width, bottleneck="plain", n_bottleneck=2)
        self.refine_net = EncoderDecoder(
            rng, 2, width, bottleneck="plain", n_bottleneck=2, skips="fourier"
        )

    def children(self):
        return [
            ("sino_net", self.sino_net),
            ("image_net", self.image_net),
            ("refine_net", self.refine_net),
        ]

    def forward(self, batch, training=False):
        """Run all stages on a prepared batch (see training.prepare_batch).

        Returns network-unit tensors: s_r (restored sinogram), x_s
        (spliced reconstruction), x_u (post-processed image), x_r
        (refined output, residual on x_u).
        """
        s_r = self.sino_net(Tensor(batch["sino_in"]), training)
        x_s, spliced = replace_and_recon(s_r, batch["s_mc"], batch["trace"], self.geom)
        x_u = self.image_net(Tensor(batch["x_mc"]), training)
        x_r = ops.add(self.refine_net(ops.concat([x_s, x_u], axis=1), training), x_u)
        return {"s_r": s_r, "spliced": spliced, "x_s": x_s, "x_u": x_u, "x_r": x_r}

    __call__ = forward

    def meta(self):
        g = self.geom
        return {
            "mode": self.mode,
            "width": str(self.width),
            "sino_bottleneck": self.sino_bottleneck,
            "sino_mid": "" if self.sino_mid is None else str(self.sino_mid),
            "seed": str(self.seed),
            "image_size": str(g.image_size),
            "pixel_spacing": repr(g.pixel_spacing),
            "num_views": str(g.num_views),
            "num_detectors": str(g.num_detectors),
            "detector_spacing": repr(g.detector_spacing),
            "source_distance": repr(g.source_distance),
            "detector_distance": repr(g.detector_distance),
            "angular_range": repr(g.angular_range),
        }


def paste_metal(image, source, mask):
    """Copy mask pixels of ``source`` into ``image`` (optional post-step)."""
    m = np.asarray(mask) > 0
    out = np.array(image, copy=True)
    out[m] = np.asarray(source)[m]
    return out


def save_checkpoint(path, pipeline, step=0, optimizer=None, extra=None):
    """Write parameters, BN statistics, and optimizer moments to one bundle."""
    meta = pipeline.meta()
    meta["step"] = str(step)
    tensors = pipeline.state_arrays()
    if optimizer is not None:
        meta["opt_t"] = str(optimizer.t)
        for i, (m, v) in enumerate(zip(optimizer.m, optimizer.v)):
            tensors[f"opt.m.{i:04d}"] = m
            tensors[f"opt.v.{i:04d}"] = v
    if extra:
        meta.update({k: str(v) for k, v in extra.items()})
    qnt.save_bundle(path, tensors, meta)


def load_optimizer_state(optimizer, tensors, meta):
    """Restore Adam moments saved by :func:`save_checkpoint`."""
    optimizer.t = int(meta.get("opt_t", "0"))
    for i in range(len(optimizer.params)):
        optimizer.m[i] = np.array(tensors[f"opt.m.{i:04d}"])
        optimizer.v[i] = np.array(tensors[f"opt.v.{i:04d}"])


def load_checkpoint(path):
    """Rebuild a pipeline (geometry included) from a checkpoint bundle."""
    tensors, meta = qnt.load_bundle(path)
    geom = FanBeamGeometry(
        image_size=int(meta["image_size"]),
        pixel_spacing=float(meta["pixel_spacing"]),
        num_views=int(meta["num_views"]),
        num_detectors=int(meta["num_detectors"]),
        detector_spacing=float(meta["detector_spacing"]),
        source_distance=float(meta["source_distance"]),
        detector_distance=float(meta["detector_distance"]),
        angular_range=float(meta["angular_range"]),
    )
    pipe = Pipeline(
        geom,
        mode=meta["mode"],
        width=int(meta["width"]),
        sino_bottleneck=meta["sino_bottleneck"],
        sino_mid=int(meta["sino_mid"]) if meta.get("sino_mid") else None,
        seed=int(meta.get("seed", "0")),
    )
    pipe.load_state(tensors)
    return pipe, meta
