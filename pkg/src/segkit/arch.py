"""MoNet and U-Net builders, parameter counting and receptive fields.

MoNet: every resolution level runs a conv block followed by an RDDC block
(four conv blocks with dilations 4, 3, 2, 1 plus an identity shortcut).
Levels are joined by stride-2 convs on the way down and 3x3 stride-2
transposed convs on the way up; each decoder level concatenates the encoder
skip and merges back to the level width before its RDDC block.

U-Net: two conv-BN-ReLU per level, 2x2 max pooling, 2x2 transposed-conv
up-sampling, base width doubling per level.
"""
from dataclasses import dataclass, replace

import numpy as np

from segkit import nn
from segkit.errors import ContractError
from segkit.optim import init_network
from segkit.tensor import Prng

FAMILIES = ("monet", "unet")


@dataclass(frozen=True)
class ArchSpec:
    name: str
    family: str
    stage_widths: tuple
    dilation_schedule: tuple = (4, 3, 2, 1)
    input_size: int = 256
    in_channels: int = 1
    dropout: float = 0.2
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3

    @classmethod
    def monet(cls, widths=(16, 32, 64), **kw):
        return cls(name="monet", family="monet", stage_widths=tuple(widths), **kw)

    @classmethod
    def unet(cls, base=64, levels=5, **kw):
        widths = tuple(base * 2**i for i in range(levels))
        return cls(name=f"unet{base}", family="unet", stage_widths=widths,
                   dilation_schedule=(), dropout=0.0, **kw)

    @classmethod
    def from_name(cls, name, **kw):
        name = name.lower().replace("-", "")
        if name == "monet":
            return cls.monet(**kw)
        if name.startswith("unet") and name[4:].isdigit():
            return cls.unet(int(name[4:]), **kw)
        raise ContractError(f"unknown architecture {name!r}")

    @property
    def downsample_count(self):
        return len(self.stage_widths) - 1

    def with_(self, **kw):
        return replace(self, **kw)

    def validate(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown family {self.family!r}")
        if len(self.stage_widths) < 1 or any(int(w) < 1 for w in self.stage_widths):
            raise ContractError(f"stage widths must be positive, got {self.stage_widths}")
        if self.family == "monet":
            d = self.dilation_schedule
            if not d or d[-1] != 1 or any(a <= b for a, b in zip(d, d[1:])):
                raise ContractError(f"dilation schedule must decrease strictly to 1, got {d}")
        if not 0 <= self.dropout < 1:
            raise ContractError("dropout must lie in [0, 1)")
        if self.input_size % (2 ** self.downsample_count):
            raise ContractError(
                f"input size {self.input_size} not divisible by 2^{self.downsample_count}")
        return self


class ConvBlock(nn.Module):
    """3x3 conv -> batch norm -> activation [-> spatial dropout]."""

    kind = "conv_block"

    def __init__(self, in_c, out_c, stride=1, dilation=1, act="elu", dropout=None,
                 spec=None, dtype=np.float32):
        super().__init__()
        mom = spec.bn_momentum if spec else 0.99
        eps = spec.bn_eps if spec else 1e-3
        self.layers = [
            self.add_child("conv", nn.Conv2d(in_c, out_c, 3, stride, dilation, dtype=dtype)),
            self.add_child("bn", nn.BatchNorm2d(out_c, mom, eps, dtype=dtype)),
            self.add_child("act", nn.ELU() if act == "elu" else nn.ReLU()),
        ]
        if dropout is not None:
            self.layers.append(self.add_child("drop", dropout))

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class DeconvBlock(ConvBlock):
    """3x3 stride-2 transposed conv -> batch norm -> ELU."""

    kind = "deconv_block"

    def __init__(self, in_c, out_c, spec=None, dtype=np.float32):
        nn.Module.__init__(self)
        mom = spec.bn_momentum if spec else 0.99
        eps = spec.bn_eps if spec else 1e-3
        self.layers = [
            self.add_child("deconv", nn.ConvTranspose2d(in_c, out_c, 3, 2, dtype=dtype)),
            self.add_child("bn", nn.BatchNorm2d(out_c, mom, eps, dtype=dtype)),
            self.add_child("act", nn.ELU()),
        ]


class RDDCBlock(nn.Module):
    """Repeated decreasingly dilated convolutions with an identity shortcut."""

    kind = "rddc"

    def __init__(self, c, dilations=(4, 3, 2, 1), dropout=0.2, rng=None, spec=None,
                 dtype=np.float32):
        super().__init__()
        self.blocks = [
            self.add_child(str(i), ConvBlock(c, c, 1, d, "elu",
                                             nn.SpatialDropout2d(dropout, rng), spec, dtype))
            for i, d in enumerate(dilations)
        ]

    def forward(self, x):
        h = x
        for b in self.blocks:
            h = b.forward(h)
        return nn.add_residual(x, h)

    def backward(self, grad):
        g = grad
        for b in reversed(self.blocks):
            g = b.backward(g)
        return grad + g


class SegNet(nn.Module):
    """Common base: input checks and no-grad inference."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec

    def check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ContractError(f"expected (n, {self.spec.in_channels}, h, w), got {x.shape}")
        step = 2 ** self.spec.downsample_count
        if x.shape[2] % step or x.shape[3] % step:
            raise ContractError(f"spatial dims {x.shape[2:]} must be multiples of {step}")

    def predict(self, x):
        """Inference-mode forward without backward caches; restores the mode."""
        mode = self.training
        self.eval()
        try:
            with nn.no_grad():
                return self.forward(x.astype(self.dtype, copy=False))
        finally:
            self.train(mode)


class MoNet(SegNet):
    def __init__(self, spec, rng, dtype=np.float32):
        super().__init__(spec)
        w = spec.stage_widths
        dil = spec.dilation_schedule
        rate = spec.dropout
        self.levels = len(w)

        def rddc(c):
            return RDDCBlock(c, dil, rate, rng, spec, dtype)

        self.enc = []
        for i, c in enumerate(w):
            if i == 0:
                conv = ConvBlock(spec.in_channels, c, 1, 1, spec=spec, dtype=dtype)
            else:
                conv = ConvBlock(w[i - 1], c, 2, 1, spec=spec, dtype=dtype)
            self.enc.append((self.add_child(f"enc{i}_conv", conv),
                             self.add_child(f"enc{i}_rddc", rddc(c))))
        self.dec = {}
        for i in range(self.levels - 2, -1, -1):
            up = self.add_child(f"dec{i}_up", DeconvBlock(w[i + 1], w[i], spec, dtype))
            merge = self.add_child(f"dec{i}_merge",
                                   ConvBlock(2 * w[i], w[i], 1, 1, spec=spec, dtype=dtype))
            self.dec[i] = (up, merge, self.add_child(f"dec{i}_rddc", rddc(w[i])))
        self.head = self.add_child("head", nn.Conv2d(w[0], 1, 1, dtype=dtype))
        self.out = self.add_child("out", nn.Sigmoid())
        self.resolutions = []

    def forward(self, x):
        self.check_input(x)
        skips = []
        self.resolutions = []
        h = x
        for conv, rddc in self.enc:
            h = rddc.forward(conv.forward(h))
            skips.append(h)
            self.resolutions.append(h.shape[2])
        for i in range(self.levels - 2, -1, -1):
            up, merge, rddc = self.dec[i]
            h = up.forward(h)
            h = rddc.forward(merge.forward(nn.concat_channels(h, skips[i])))
            self.resolutions.append(h.shape[2])
        return self.out.forward(self.head.forward(h))

    def backward(self, grad):
        g = self.head.backward(self.out.backward(grad))
        gskip = {}
        for i in range(self.levels - 1):
            up, merge, rddc = self.dec[i]
            g = merge.backward(rddc.backward(g))
            g_up, gskip[i] = nn.split_channels(g, up.layers[0].out_c)
            g = up.backward(g_up)
        for i in range(self.levels - 1, -1, -1):
            conv, rddc = self.enc[i]
            g = conv.backward(rddc.backward(g))
            if i > 0:
                g = g + gskip[i - 1]
        return g


class UNet(SegNet):
    def __init__(self, spec, rng=None, dtype=np.float32):
        super().__init__(spec)
        w = spec.stage_widths
        self.levels = len(w)

        def double(cin, cout):
            return nn.Sequential(ConvBlock(cin, cout, act="relu", spec=spec, dtype=dtype),
                                 ConvBlock(cout, cout, act="relu", spec=spec, dtype=dtype))

        self.enc = []
        cin = spec.in_channels
        for i, c in enumerate(w):
            pool = self.add_child(f"pool{i}", nn.MaxPool2d()) if i > 0 else None
            self.enc.append((pool, self.add_child(f"enc{i}", double(cin, c))))
            cin = c
        self.dec = {}
        for i in range(self.levels - 2, -1, -1):
            up = self.add_child(f"up{i}", nn.ConvTranspose2d(w[i + 1], w[i], 2, 2, dtype=dtype))
            self.dec[i] = (up, self.add_child(f"dec{i}", double(2 * w[i], w[i])))
        self.head = self.add_child("head", nn.Conv2d(w[0], 1, 1, dtype=dtype))
        self.out = self.add_child("out", nn.Sigmoid())

    def forward(self, x):
        self.check_input(x)
        skips = []
        h = x
        for pool, block in self.enc:
            if pool is not None:
                h = pool.forward(h)
            h = block.forward(h)
            skips.append(h)
        for i in range(self.levels - 2, -1, -1):
            up, block = self.dec[i]
            h = block.forward(nn.concat_channels(up.forward(h), skips[i]))
        return self.out.forward(self.head.forward(h))

    def backward(self, grad):
        g = self.head.backward(self.out.backward(grad))
        gskip = {}
        for i in range(self.levels - 1):
            up, block = self.dec[i]
            g_up, gskip[i] = nn.split_channels(block.backward(g), up.out_c)
            g = up.backward(g_up)
        for i in range(self.levels - 1, -1, -1):
            pool, block = self.enc[i]
            g = block.backward(g)
            if pool is not None:
                g = pool.backward(g) + gskip[i - 1]
        return g


def build(spec, rng=None, dtype=np.float32):
    """Build the network for ``spec``.

    With a Prng, weights are He-uniform draws taken from it in graph order and
    the dropout stream is seeded from the next draw. Without one, parameters
    keep their structural defaults (zero weights), which is enough for
    counting and sizing.
    """
    spec.validate()
    # dropout layers keep this reference; reseeded after weight init
    holder = _RngHolder(Prng(0))
    cls = MoNet if spec.family == "monet" else UNet
    net = cls(spec, holder, dtype)
    if rng is not None:
        init_network(net, rng)
        holder.rng = Prng(int(rng.integers(0, 2**63)))
    return net


class _RngHolder:
    """Late-bound Prng so dropout layers can be created before seeding."""

    def __init__(self, rng):
        self.rng = rng

    def random(self, size=None):
        return self.rng.random(size)


def count_params(spec_or_net):
    net = spec_or_net if isinstance(spec_or_net, nn.Module) else build(spec_or_net)
    trainable = non_trainable = 0
    for _, p in net.named_parameters():
        if p.trainable:
            trainable += p.data.size
        else:
            non_trainable += p.data.size
    return {"trainable": trainable, "non_trainable": non_trainable,
            "total": trainable + non_trainable}


def stack_receptive_field(layers):
    """Receptive field of a chain of (kernel, stride, dilation) layers."""
    rf, jump = 1, 1
    for k, stride, dilation in layers:
        rf += dilation * (k - 1) * jump
        jump *= stride
    return rf


def rddc_receptive_field(dilations=(4, 3, 2, 1)):
    return stack_receptive_field([(3, 1, d) for d in dilations])


def encoder_layers(spec, at_stage):
    """(kernel, stride, dilation) chain from the input to the end of an
    encoder stage; ``at_stage`` is an index or 'bottleneck'."""
    if at_stage == "bottleneck":
        at_stage = len(spec.stage_widths) - 1
    if not 0 <= at_stage < len(spec.stage_widths):
        raise ContractError(f"no encoder stage {at_stage!r}")
    layers = []
    for i in range(at_stage + 1):
        if spec.family == "monet":
            layers.append((3, 1 if i == 0 else 2, 1))
            layers.extend((3, 1, d) for d in spec.dilation_schedule)
        else:
            if i > 0:
                layers.append((2, 2, 1))
            layers.extend([(3, 1, 1), (3, 1, 1)])
    return layers


def receptive_field(spec, at_stage="bottleneck"):
    return stack_receptive_field(encoder_layers(spec, at_stage))
