"""U-Net generators, PatchGAN discriminators and the identity feature network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Tape, Tensor, no_grad, ops


class Module:
    """Parameter container with a train/eval switch."""

    training = True

    def children(self) -> dict[str, "Module"]:
        return {k: v for k, v in vars(self).items() if isinstance(v, Module)} | {
            f"{k}.{i}": m
            for k, v in vars(self).items()
            if isinstance(v, list)
            for i, m in enumerate(v)
            if isinstance(m, Module)
        }

    def own_parameters(self) -> dict[str, Tensor]:
        return {}

    def own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + k, v) for k, v in self.own_parameters().items()]
        for name, child in self.children().items():
            out += child.named_parameters(f"{prefix}{name}.")
        return out

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = [(prefix + k, v) for k, v in self.own_buffers().items()]
        for name, child in self.children().items():
            out += child.named_buffers(f"{prefix}{name}.")
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children().values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = {prefix + k: p.data for k, p in self.named_parameters()}
        state.update({prefix + k: b for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, p in self.named_parameters():
            arr = state[prefix + k]
            if arr.shape != p.shape:
                raise ValueError(f"{prefix + k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
        for k, b in self.named_buffers():
            b[...] = state[prefix + k]


def _normal(rng: np.random.Generator, shape, std=0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, bias=False):
        self.stride, self.padding = stride, padding
        self.weight = _normal(rng, (c_out, c_in, kernel, kernel))
        self.bias = Tensor(np.zeros((1, c_out, 1, 1)), requires_grad=True) if bias else None

    def own_parameters(self):
        return {"weight": self.weight} | ({"bias": self.bias} if self.bias is not None else {})

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.weight, self.stride, self.padding)
        return ops.add(y, self.bias) if self.bias is not None else y


class ConvTranspose2d(Conv2d):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, bias=False):
        self.stride, self.padding = stride, padding
        self.weight = _normal(rng, (c_in, c_out, kernel, kernel))
        self.bias = Tensor(np.zeros((1, c_out, 1, 1)), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.conv_transpose2d(x, self.weight, self.stride, self.padding)
        return ops.add(y, self.bias) if self.bias is not None else y


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def own_parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def own_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Linear(Module):
    def __init__(self, rng, n_in, n_out):
        self.weight = Tensor(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out)), requires_grad=True)
        self.bias = Tensor(np.zeros((1, n_out)), requires_grad=True)

    def own_parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(ops.matmul(x, self.weight), self.bias)


# ----------------------------------------------------------------- generator


@dataclass(frozen=True)
class GeneratorConfig:
    image_channels: int = 1
    heatmap_channels: int = 18
    channels: tuple[int, ...] = (32, 64, 128, 256)
    depth: int = 6
    residual: bool = False

    def widths(self) -> list[int]:
        return [self.channels[min(i, len(self.channels) - 1)] for i in range(self.depth)]


class GeneratorNet(Module):
    """U-Net: 4x4 stride-2 encoder convs mirrored by transposed convs with skips.

    Encoder level ``i`` halves the spatial extent; with ``depth`` levels the
    input extent must be a power of two no smaller than ``2**depth``.
    """

    def __init__(self, config: GeneratorConfig, rng: np.random.Generator):
        self.config = config
        w = config.widths()
        c_in = config.image_channels + config.heatmap_channels
        self.down = [Conv2d(rng, c_in, w[0], 4, 2, 1)]
        self.down_norm = []
        for i in range(1, config.depth):
            self.down.append(Conv2d(rng, w[i - 1], w[i], 4, 2, 1))
            # innermost level is 1x1 at the design size; it stays un-normalized
            if i < config.depth - 1:
                self.down_norm.append(BatchNorm2d(w[i]))
        self.up = []
        self.up_norm = []
        for i in reversed(range(1, config.depth)):
            c = w[i] if i == config.depth - 1 else 2 * w[i]
            self.up.append(ConvTranspose2d(rng, c, w[i - 1], 4, 2, 1))
            self.up_norm.append(BatchNorm2d(w[i - 1]))
        self.out = ConvTranspose2d(rng, 2 * w[0], config.image_channels, 4, 2, 1, bias=True)

    def check_input(self, image: Tensor, heatmap: Tensor) -> None:
        cfg = self.config
        if image.ndim != 4 or heatmap.ndim != 4:
            raise ValueError("generator expects [B, C, H, W] tensors")
        if image.shape[1] != cfg.image_channels or heatmap.shape[1] != cfg.heatmap_channels:
            raise ValueError(
                f"channel mismatch: image {image.shape[1]} (want {cfg.image_channels}), "
                f"heatmap {heatmap.shape[1]} (want {cfg.heatmap_channels})"
            )
        if image.shape[0] != heatmap.shape[0] or image.shape[2:] != heatmap.shape[2:]:
            raise ValueError(f"image {image.shape} and heatmap {heatmap.shape} disagree")
        for extent in image.shape[2:]:
            if extent & (extent - 1) or extent < 2**cfg.depth:
                raise ValueError(f"spatial extent {extent} must be a power of two >= {2**cfg.depth}")

    def __call__(self, image: Tensor, heatmap: Tensor, skip_mask: list[float] | None = None) -> Tensor:
        """``skip_mask[i]`` scales the skip from encoder level ``i`` (ablation hook)."""
        self.check_input(image, heatmap)
        x = ops.channel_concat([image, heatmap])
        skips = []
        for i, conv in enumerate(self.down):
            x = conv(x)
            if 0 < i < self.config.depth - 1:
                x = self.down_norm[i - 1](x)
            x = ops.leaky_relu(x)
            skips.append(x)
        if skip_mask is not None:
            skips = [ops.scalar_mul(s, m) if m != 1 else s for s, m in zip(skips, skip_mask)]
        x = skips[-1]
        for j, (conv, norm) in enumerate(zip(self.up, self.up_norm)):
            x = ops.relu(norm(conv(x)))
            x = ops.channel_concat([x, skips[self.config.depth - 2 - j]])
        out = self.out(x)
        if self.config.residual:
            # predict a logit-space correction to the input image
            out = ops.add(out, _logit(image))
        return ops.sigmoid(out)


def _logit(image: Tensor, eps: float = 1e-3) -> Tensor:
    p = ops.clamp(image, eps, 1.0 - eps)
    return ops.sub(ops.log(p), ops.log(ops.add_scalar(ops.scalar_mul(p, -1.0), 1.0)))


def generator_forward(net: GeneratorNet, image: Tensor, heatmap: Tensor) -> Tensor:
    return net(image, heatmap)


# ------------------------------------------------------------- discriminator


@dataclass(frozen=True)
class DiscriminatorConfig:
    image_channels: int = 1
    heatmap_channels: int = 18
    channels: tuple[int, ...] = (64, 128, 256, 512)
    strides: tuple[int, ...] = (2, 2, 2, 1, 1)
    kernel: int = 4
    padding: int = 1

    def output_size(self, size: int) -> int:
        for stride in self.strides:
            size = ops.conv_output_size(size, self.kernel, stride, self.padding)
        return size


class DiscriminatorNet(Module):
    """PatchGAN over the channel-concatenated triplet (input, heatmap, output).

    ``strides`` lists every conv including the final 1-channel logit conv.
    """

    def __init__(self, config: DiscriminatorConfig, rng: np.random.Generator):
        self.config = config
        c_in = 2 * config.image_channels + config.heatmap_channels
        n = len(config.strides)
        self.convs, self.norms = [], []
        for i, stride in enumerate(config.strides):
            last = i == n - 1
            c_out = 1 if last else config.channels[min(i, len(config.channels) - 1)]
            self.convs.append(Conv2d(rng, c_in, c_out, config.kernel, stride, config.padding, bias=last))
            if 0 < i < n - 1:
                self.norms.append(BatchNorm2d(c_out))
            c_in = c_out

    def __call__(self, image_in: Tensor, heatmap: Tensor, image_out: Tensor) -> Tensor:
        if not (image_in.shape == image_out.shape and image_in.shape[2:] == heatmap.shape[2:]
                and image_in.shape[0] == heatmap.shape[0]):
            raise ValueError(f"triplet shapes disagree: {image_in.shape}, {heatmap.shape}, {image_out.shape}")
        x = ops.channel_concat([image_in, heatmap, image_out])
        n = len(self.convs)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i == n - 1:
                break
            if i > 0:
                x = self.norms[i - 1](x)
            x = ops.leaky_relu(x)
        return x

    def receptive_field(self) -> tuple[int, int]:
        """(size, jump) of one output logit in input pixels."""
        size, jump = 1, 1
        for stride in self.config.strides:
            size += (self.config.kernel - 1) * jump
            jump *= stride
        return size, jump


def discriminator_forward(net: DiscriminatorNet, image_in: Tensor, heatmap: Tensor, image_out: Tensor) -> Tensor:
    return net(image_in, heatmap, image_out)


# ------------------------------------------------------------ identity net


@dataclass(frozen=True)
class IdentityConfig:
    image_channels: int = 1
    image_size: int = 64
    channels: tuple[int, ...] = (8, 16, 16, 32, 32)
    embedding_dim: int = 64
    n_identities: int = 20


class IdentityNet(Module):
    """Five convs, two 2x2 max-pools and a fully connected embedding.

    conv-conv-pool-conv-conv-pool-conv(4x4, stride 2)-fc; the classification head
    sits on top of the embedding and is used only while pretraining.
    """

    def __init__(self, config: IdentityConfig, rng: np.random.Generator):
        self.config = config
        c = config.channels
        self.convs = [
            Conv2d(rng, config.image_channels, c[0], 3, 1, 1, bias=True),
            Conv2d(rng, c[0], c[1], 3, 1, 1, bias=True),
            Conv2d(rng, c[1], c[2], 3, 1, 1, bias=True),
            Conv2d(rng, c[2], c[3], 3, 1, 1, bias=True),
            Conv2d(rng, c[3], c[4], 4, 2, 1, bias=True),
        ]
        for conv in self.convs:
            fan_in = conv.weight.data[0].size
            conv.weight.data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=conv.weight.shape)
        side = config.image_size // 8
        self.embed = Linear(rng, c[4] * side * side, config.embedding_dim)
        self.head = Linear(rng, config.embedding_dim, config.n_identities)

    def __call__(self, image: Tensor) -> Tensor:
        cfg = self.config
        if image.ndim != 4 or image.shape[1] != cfg.image_channels or image.shape[2:] != (cfg.image_size,) * 2:
            raise ValueError(f"identity net expects [B, {cfg.image_channels}, {cfg.image_size}, {cfg.image_size}], got {image.shape}")
        x = image
        for i, conv in enumerate(self.convs):
            x = ops.leaky_relu(conv(x))
            if i in (1, 3):
                x = ops.max_pool2d(x, 2)
        x = ops.reshape(x, (x.shape[0], -1))
        return self.embed(x)

    def logits(self, image: Tensor) -> Tensor:
        return self.head(ops.leaky_relu(self(image)))


def identity_features(net: IdentityNet, image: Tensor) -> Tensor:
    return net(image)


@dataclass
class IdentityTrainResult:
    net: IdentityNet
    train_accuracy: float
    heldout_accuracy: float
    losses: list[float] = field(default_factory=list)


def classify(net: IdentityNet, images: np.ndarray, batch: int = 64) -> np.ndarray:
    preds = []
    with no_grad():
        for s in range(0, len(images), batch):
            preds.append(net.logits(Tensor(images[s : s + batch])).data.argmax(axis=1))
    return np.concatenate(preds)


def pretrain_identity(
    images: np.ndarray,
    labels: np.ndarray,
    heldout_images: np.ndarray,
    heldout_labels: np.ndarray,
    config: IdentityConfig | None = None,
    iterations: int = 300,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
) -> IdentityTrainResult:
    """Train the identity classifier with softmax cross-entropy, then freeze it.

    ``labels`` are integers in ``[0, n_identities)``.  The returned net is in
    evaluation mode with ``requires_grad`` cleared on every parameter.
    """
    labels = np.asarray(labels)
    n_ids = int(labels.max()) + 1
    if len(np.unique(labels)) < 2:
        raise ValueError("identity pretraining needs at least 2 identities")
    config = config or IdentityConfig(image_channels=images.shape[1], image_size=images.shape[2], n_identities=n_ids)
    rng = np.random.default_rng(seed)
    net = IdentityNet(config, rng)
    opt = Adam(net.named_parameters(), lr=lr, beta1=0.9)
    losses = []
    for it in range(iterations):
        idx = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        with Tape() as tape:
            loss = ops.log_softmax_cross_entropy(net.logits(Tensor(images[idx])), labels[idx])
        opt.step(tape.gradient(loss, opt.tensors))
        losses.append(loss.item())
    net.eval().requires_grad_(False)
    train_acc = float(np.mean(classify(net, images) == labels))
    held_acc = float(np.mean(classify(net, heldout_images) == np.asarray(heldout_labels)))
    return IdentityTrainResult(net, train_acc, held_acc, losses)
