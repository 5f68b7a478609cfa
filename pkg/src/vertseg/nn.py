"""Layer and parameter containers on top of the autodiff engine."""

from __future__ import annotations

import numpy as np

from .autodiff import DTYPE, Tensor, conv2d, grad_enabled, matmul


class Parameter(Tensor):
    """Trainable tensor; discovered automatically by `Module` traversal."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class: child modules and parameters are found by attribute walk.

    Parameters are `Parameter` attributes; persistent non-trainable state
    (running statistics, frozen projections) goes through `register_buffer`.
    """

    def __init__(self):
        self.training = True
        self._buffers = {}

    def register_buffer(self, name, array):
        self._buffers[name] = np.asarray(array, dtype=DTYPE)

    def buffer(self, name):
        return self._buffers[name]

    def set_buffer(self, name, array):
        self._buffers[name] = np.asarray(array, dtype=DTYPE)

    # -- traversal -----------------------------------------------------

    def named_modules(self, prefix=""):
        yield prefix.rstrip("."), self
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{key}.{i}.")

    def named_parameters(self):
        for mod_name, mod in self.named_modules():
            pre = f"{mod_name}." if mod_name else ""
            for key, value in vars(mod).items():
                if isinstance(value, Parameter):
                    yield f"{pre}{key}", value

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for mod_name, mod in self.named_modules():
            pre = f"{mod_name}." if mod_name else ""
            for key in mod._buffers:
                yield f"{pre}{key}", mod._buffers[key]

    def train(self, flag=True):
        for _, mod in self.named_modules():
            mod.training = flag
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    # -- state ----------------------------------------------------------

    def state_dict(self):
        state = {f"param:{k}": v.data.copy() for k, v in self.named_parameters()}
        state.update({f"buffer:{k}": v.copy() for k, v in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        own_params = dict(self.named_parameters())
        own_buffers = dict(self.named_buffers())
        expected = set(f"param:{k}" for k in own_params) | \
            set(f"buffer:{k}" for k in own_buffers)
        given = set(state)
        if expected != given:
            missing = sorted(expected - given)
            extra = sorted(given - expected)
            raise ValueError(f"state mismatch: missing={missing}, unexpected={extra}")
        for key, value in state.items():
            kind, name = key.split(":", 1)
            if kind == "param":
                target = own_params[name]
                if target.data.shape != value.shape:
                    raise ValueError(
                        f"shape mismatch for {name}: {target.data.shape} vs {value.shape}")
                target.data = np.asarray(value, dtype=DTYPE).copy()
            else:
                mod_path, _, buf = name.rpartition(".")
                mod = self
                for part in mod_path.split(".") if mod_path else []:
                    mod = mod[int(part)] if part.isdigit() else getattr(mod, part)
                mod.set_buffer(buf, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    """Indexable list of child modules."""

    def __init__(self, modules=()):
        super().__init__()
        self.items = list(modules)

    def append(self, module):
        self.items.append(module)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


class Conv2d(Module):
    """2-D convolution layer with He-normal initialisation."""

    def __init__(self, in_ch, out_ch, kernel_size, rng, stride=1, padding=0,
                 dilation=1, bias=True):
        super().__init__()
        if out_ch < 1:
            raise ValueError(f"out_channels must be positive, got {out_ch}")
        fan_in = in_ch * kernel_size * kernel_size
        std = np.sqrt(2.0 / fan_in)
        self.weight = Parameter(rng.normal(0.0, std, (out_ch, in_ch,
                                                      kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    def forward(self, x, dilation=None):
        d = self.dilation if dilation is None else dilation
        pad = self.padding if dilation is None else \
            ((self.weight.shape[2] - 1) * d) // 2
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      padding=pad, dilation=d)


class Dense(Module):
    """Fully connected layer, (N, in) -> (N, out)."""

    def __init__(self, in_features, out_features, rng, bias=True):
        super().__init__()
        std = np.sqrt(2.0 / in_features)
        self.weight = Parameter(rng.normal(0.0, std, (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class BatchNorm2d(Module):
    """Batch normalisation over (N, H, W) per channel.

    Training mode normalises with batch statistics and updates running
    estimates; eval mode uses the frozen running estimates, making the
    forward pass a pure function of the input.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.eps = eps
        self.momentum = momentum
        self.channels = channels
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x):
        c = self.channels
        if self.training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            count = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            unbiased = var.data.reshape(c) * (count / max(count - 1, 1))
            m = self.momentum
            self.set_buffer("running_mean",
                            (1 - m) * self.buffer("running_mean") + m * mu.data.reshape(c))
            self.set_buffer("running_var",
                            (1 - m) * self.buffer("running_var") + m * unbiased)
            xhat = centered / (var + self.eps).sqrt()
            return xhat * self.gamma.reshape(1, c, 1, 1) + self.beta.reshape(1, c, 1, 1)
        if grad_enabled():
            # eval under a live tape: keep gamma/beta on the graph
            rm = Tensor(self.buffer("running_mean").reshape(1, c, 1, 1))
            rv = Tensor(self.buffer("running_var").reshape(1, c, 1, 1))
            xhat = (x - rm) / (rv + self.eps).sqrt()
            return xhat * self.gamma.reshape(1, c, 1, 1) + self.beta.reshape(1, c, 1, 1)
        # pure inference: fold frozen statistics into one scale and one shift
        inv = 1.0 / np.sqrt(self.buffer("running_var") + self.eps)
        scale = (self.gamma.data * inv).reshape(1, c, 1, 1)
        shift = (self.beta.data - self.buffer("running_mean") * self.gamma.data
                 * inv).reshape(1, c, 1, 1)
        return Tensor(x.data * scale + shift)
