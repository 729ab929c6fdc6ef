"""The learnable pieces: feature encoder, classifier head, latent decoder.

The encoder is a relu MLP mapping inputs to a fixed embedding space;
the classifier is one linear map over *all* classes, allocated up
front (class-incremental heads are masked in the trainer, never
resized). The decoder maps learnable latents to inputs and is frozen
during exemplar synthesis: identity by default, or a small linear map
pretrained once by reconstruction.
"""

import numpy as np

from . import autodiff as ad
from .seeding import child_rng

DEFAULT_HIDDEN = 32
DEFAULT_LAYERS = 2
DEFAULT_EMBED_DIM = 16


class Mlp:
    """Fully connected relu stack; the last layer is affine (no relu)."""

    def __init__(self, dims, seed: int, bias: bool = True):
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        rng = child_rng(seed, "mlp-init", *dims)
        self.dims = list(dims)
        self.bias = bias
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(dims, dims[1:]):
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            self.weights.append(ad.Tensor(w, requires_grad=True))
            if bias:
                self.biases.append(ad.Tensor(np.zeros(fan_out), requires_grad=True))

    def forward(self, x) -> ad.Tensor:
        h = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        if h.shape[-1] != self.dims[0]:
            raise ad.ShapeError(
                f"expected inputs of dim {self.dims[0]}, got shape {h.shape}")
        last = len(self.weights) - 1
        for i, w in enumerate(self.weights):
            h = ad.matmul(h, w)
            if self.bias:
                h = ad.add(h, self.biases[i])
            if i < last:
                h = ad.relu(h)
        return h

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Graph-free forward for evaluation loops; bit-identical to forward()."""
        h = np.asarray(x, dtype=np.float64)
        squeeze = h.ndim == 1
        if squeeze:
            h = h[None, :]
        last = len(self.weights) - 1
        for i, w in enumerate(self.weights):
            h = np.einsum("nk,km->nm", h, w.data)
            if self.bias:
                h = h + self.biases[i].data
            if i < last:
                h = np.maximum(h, 0.0)
        return h[0] if squeeze else h

    def jacobian_np(self, x: np.ndarray) -> np.ndarray:
        """Exact (d_out, d_in) Jacobian of the forward map at a single input."""
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 1:
            raise ad.ShapeError("jacobian_np expects a single input vector")
        jac = np.eye(self.dims[0])
        last = len(self.weights) - 1
        for i, w in enumerate(self.weights):
            h = h @ w.data
            if self.bias:
                h = h + self.biases[i].data
            jac = w.data.T @ jac
            if i < last:
                mask = h > 0
                h = np.where(mask, h, 0.0)
                jac = jac * mask[:, None]
        return jac

    def parameters(self):
        return list(self.weights) + list(self.biases)

    def named_parameters(self, prefix: str):
        named = [(f"{prefix}.w{i}", w) for i, w in enumerate(self.weights)]
        named += [(f"{prefix}.b{i}", b) for i, b in enumerate(self.biases)]
        return named

    def set_requires_grad(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag


class Decoder:
    """Maps latents to input space: identity, or a frozen affine map."""

    def __init__(self, kind: str, d_latent: int, d_in: int,
                 weight: np.ndarray | None = None, offset: np.ndarray | None = None):
        if kind not in ("identity", "linear"):
            raise ValueError(f"unknown decoder kind {kind!r}")
        if kind == "identity" and d_latent != d_in:
            raise ValueError(f"identity decoder needs d_latent == d_in, "
                             f"got {d_latent} != {d_in}")
        self.kind = kind
        self.d_latent = d_latent
        self.d_in = d_in
        if kind == "linear":
            self.weight = np.zeros((d_latent, d_in)) if weight is None else weight
            self.offset = np.zeros(d_in) if offset is None else offset

    def decode(self, z) -> ad.Tensor:
        t = z if isinstance(z, ad.Tensor) else ad.Tensor(z)
        if t.shape[-1] != self.d_latent:
            raise ad.ShapeError(f"decoder expects latents of dim {self.d_latent}, "
                                f"got shape {t.shape}")
        if self.kind == "identity":
            return ad.scale(t, 1.0)  # graph node so grads flow to z
        out = ad.matmul(t, ad.Tensor(self.weight))
        return ad.add(out, ad.Tensor(self.offset))

    def decode_np(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "identity":
            return z.copy()
        return z @ self.weight + self.offset

    def jacobian_np(self) -> np.ndarray:
        """(d_in, d_latent) Jacobian; constant since decoders are affine."""
        if self.kind == "identity":
            return np.eye(self.d_in)
        return self.weight.T


def pretrain_linear_decoder(train_x: np.ndarray, d_latent: int, seed: int) -> Decoder:
    """Fit a frozen affine decoder by reconstruction through a random projection.

    Inputs are projected to the latent space with a fixed seeded matrix;
    the decoder is the least-squares affine map back to input space.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    d_in = train_x.shape[1]
    rng = child_rng(seed, "decoder-projection")
    proj = rng.standard_normal((d_in, d_latent)) / np.sqrt(d_in)
    z = train_x @ proj
    aug = np.hstack([z, np.ones((len(z), 1))])
    sol, *_ = np.linalg.lstsq(aug, train_x, rcond=None)
    return Decoder("linear", d_latent, d_in, weight=sol[:-1], offset=sol[-1])


class Network:
    """Encoder + classifier + decoder, owned by the trainer."""

    def __init__(self, d_in: int, n_classes: int, seed: int,
                 hidden: int = DEFAULT_HIDDEN, n_layers: int = DEFAULT_LAYERS,
                 d_emb: int = DEFAULT_EMBED_DIM, decoder: Decoder | None = None,
                 encoder_bias: bool = True):
        self.d_in = d_in
        self.d_emb = d_emb
        self.n_classes = n_classes
        self.encoder = Mlp([d_in] + [hidden] * n_layers + [d_emb],
                           seed=seed, bias=encoder_bias)
        self.classifier = Mlp([d_emb, n_classes], seed=seed + 1)
        self.decoder = decoder or Decoder("identity", d_in, d_in)

    def encode(self, x) -> ad.Tensor:
        return self.encoder.forward(x)

    def encode_np(self, x: np.ndarray) -> np.ndarray:
        return self.encoder.forward_np(x)

    def classify(self, embedding) -> ad.Tensor:
        return self.classifier.forward(embedding)

    def classify_np(self, embedding: np.ndarray) -> np.ndarray:
        return self.classifier.forward_np(embedding)

    def decode(self, z) -> ad.Tensor:
        return self.decoder.decode(z)

    def predict(self, x: np.ndarray, allowed=None) -> np.ndarray:
        """Argmax class ids, optionally masked to an allowed class set.

        np.argmax breaks ties toward the lowest class id.
        """
        logits = self.classify_np(self.encode_np(np.atleast_2d(x)))
        if allowed is not None:
            mask = np.full(self.n_classes, -np.inf)
            mask[sorted(allowed)] = 0.0
            logits = logits + mask
        return np.argmax(logits, axis=1)

    def parameters(self):
        return self.encoder.parameters() + self.classifier.parameters()

    def named_parameters(self):
        return (self.encoder.named_parameters("encoder")
                + self.classifier.named_parameters("classifier"))

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True

    def state_payload(self) -> dict:
        return ad.checkpoint_payload(self.named_parameters())

    def load_state_payload(self, payload: dict):
        arrays = ad.checkpoint_arrays(payload)
        for name, tensor in self.named_parameters():
            tensor.data = arrays[name].copy()

    def save(self, path):
        ad.save_checkpoint(path, self.named_parameters())

    def load(self, path):
        arrays = ad.load_checkpoint(path)
        for name, tensor in self.named_parameters():
            tensor.data = arrays[name].copy()
