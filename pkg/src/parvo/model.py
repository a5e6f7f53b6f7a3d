"""The victim: a CLIP-like classifier with frozen encoders and hot PEFT parts.

Logits are the bidirectional feature alignment LS * IF . TF^T over
l2-normalized image and text features. The text side is deliberately small
(token embeddings -> mean-pool -> MLP): the attack never differentiates
through it, so its scale does not matter for reconstruction quality.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Node

Array = np.ndarray

PEFT_MODES = ("SoftPrompt", "TextAdapter", "DoubleAdapter")
ENCODER_KINDS = ("MLP", "Conv2", "Conv4", "Conv8", "Res1", "Res3", "Res6")

CONV_CHANNELS = 8
KERNEL = 3
HASH_BUCKETS = 1024

# class-name tokens should dominate the pooled text input; the learnable
# prompt starts near zero (CoOp-style) so per-class paths stay heterogeneous
PROMPT_INIT_SCALE = 0.02
EMBED_INIT_SCALE = 1.0

# negative bias offset (in units of pre-activation spread) for the text MLP
# hidden layer: only strongly class-driven units fire, which keeps per-class
# gradient channels nearly orthogonal -- the property reverse estimation
# leans on
TEXT_SELECTIVITY = 1.5


@dataclass
class EncoderStructure:
    kind: str = "Conv2"
    feature_dim: int = 64

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError("unknown encoder kind %r (choose from %s)" % (self.kind, ENCODER_KINDS))
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")


@dataclass
class SoftPrompt:
    values: Array  # [prompt_len, embed_dim]

    @property
    def total_len(self) -> int:
        return int(self.values.size)


@dataclass
class Adapter:
    W1: Array
    b1: Array
    W2: Array
    b2: Array
    activation: str = "relu"
    placement: str = "text"

    def tensors(self) -> dict:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------


def tokenize(name: str) -> list:
    toks = [t for t in re.split(r"[\s\-]+", name.lower()) if t]
    if not toks:
        raise ValueError("class name %r has no tokens" % name)
    return toks


def build_vocab(class_names) -> dict:
    words = sorted({t for name in class_names for t in tokenize(name)})
    return {w: i for i, w in enumerate(words)}


def _bucket(word: str) -> int:
    digest = hashlib.md5(word.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % HASH_BUCKETS


def token_ids(name: str, vocab: dict) -> list:
    return [vocab[t] if t in vocab else len(vocab) + _bucket(t) for t in tokenize(name)]


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


@dataclass
class MultimodalModel:
    structure: EncoderStructure
    image_layers: list  # list of dicts, see build_model
    embedding: Array  # [vocab + HASH_BUCKETS, embed_dim]
    text_mlp: list  # [(W, b), ...] with relu between layers
    soft_prompt: SoftPrompt
    text_adapter: Adapter | None
    image_adapter: Adapter | None
    logit_scale: float
    class_names: list
    peft_mode: str
    image_shape: tuple  # (C, H, W)
    vocab: dict
    seed: int
    normalize_features: bool = True
    token_id_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.peft_mode not in PEFT_MODES:
            raise ValueError("unknown peft_mode %r" % self.peft_mode)
        if self.logit_scale <= 0:
            raise ValueError("logit scale must be positive")
        if not self.class_names:
            raise ValueError("class_names must be nonempty")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class_names must be pairwise distinct")
        if self.peft_mode in ("TextAdapter", "DoubleAdapter") and self.text_adapter is None:
            raise ValueError("%s mode requires a text adapter" % self.peft_mode)
        if self.peft_mode == "DoubleAdapter":
            if self.image_adapter is None:
                raise ValueError("DoubleAdapter mode requires an image adapter")
            for ad in (self.text_adapter, self.image_adapter):
                if ad.activation == "relu":
                    raise ValueError(
                        "DoubleAdapter mode needs twice-differentiable adapters; "
                        "relu adapters are rejected"
                    )

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def feature_dim(self) -> int:
        return self.structure.feature_dim

    def class_token_rows(self, i: int) -> Array:
        ids = self.token_id_cache.get(i)
        if ids is None:
            ids = token_ids(self.class_names[i], self.vocab)
            self.token_id_cache[i] = ids
        return self.embedding[ids]

    def hot_params(self) -> dict:
        """The trainable (leaked) parameters selected by peft_mode."""
        if self.peft_mode == "SoftPrompt":
            return {"prompt": self.soft_prompt.values}
        if self.peft_mode == "TextAdapter":
            return {"text_adapter." + k: v for k, v in self.text_adapter.tensors().items()}
        out = {"text_adapter." + k: v for k, v in self.text_adapter.tensors().items()}
        out.update({"image_adapter." + k: v for k, v in self.image_adapter.tensors().items()})
        return out

    def frozen_params(self) -> dict:
        """Everything not selected by peft_mode, in a stable order."""
        out = {}
        for li, layer in enumerate(self.image_layers):
            for k, v in layer.items():
                if isinstance(v, np.ndarray):
                    out["image.%d.%s" % (li, k)] = v
        out["embedding"] = self.embedding
        for li, (w, b) in enumerate(self.text_mlp):
            out["text_mlp.%d.W" % li] = w
            out["text_mlp.%d.b" % li] = b
        hot = self.hot_params()
        if self.peft_mode != "SoftPrompt":
            out["prompt"] = self.soft_prompt.values
        if self.text_adapter is not None and "text_adapter.W1" not in hot:
            out.update({"text_adapter." + k: v for k, v in self.text_adapter.tensors().items()})
        if self.image_adapter is not None and "image_adapter.W1" not in hot:
            out.update({"image_adapter." + k: v for k, v in self.image_adapter.tensors().items()})
        return out

    def set_hot_params(self, values: dict) -> None:
        """Overwrite the hot parameters (a client/server update step)."""
        for name, arr in values.items():
            arr = np.asarray(arr, dtype=np.float64)
            if name == "prompt":
                if arr.shape != self.soft_prompt.values.shape:
                    raise ValueError("prompt shape mismatch")
                self.soft_prompt.values = arr
            elif name.startswith("text_adapter."):
                setattr(self.text_adapter, name.split(".", 1)[1], arr)
            elif name.startswith("image_adapter."):
                setattr(self.image_adapter, name.split(".", 1)[1], arr)
            else:
                raise ValueError("unknown hot parameter %r" % name)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.frozen_params()):
            v = self.frozen_params()[name]
            h.update(name.encode())
            h.update(str(v.shape).encode())
            h.update(v.tobytes())
        return h.hexdigest()


def _uniform(rng, shape, fan_in):
    a = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-a, a, size=shape)


def _build_image_layers(rng, structure: EncoderStructure, image_shape, mlp_layers=2):
    c, h, w = image_shape
    kind = structure.kind
    d = structure.feature_dim
    layers = []
    if kind == "MLP":
        n = c * h * w
        if mlp_layers == 1:
            layers.append({"kind": "linear", "W": _uniform(rng, (d, n), n), "b": np.zeros(d)})
        else:
            hidden = d
            layers.append({"kind": "linear", "W": _uniform(rng, (hidden, n), n), "b": _uniform(rng, (hidden,), n)})
            layers.append({"kind": "relu"})
            layers.append({"kind": "linear", "W": _uniform(rng, (d, hidden), hidden), "b": _uniform(rng, (d,), hidden)})
        return layers

    depth = int(kind[-1])
    ch = CONV_CHANNELS
    fan = c * KERNEL * KERNEL
    if kind.startswith("Conv"):
        in_ch = c
        for _ in range(depth):
            fan = in_ch * KERNEL * KERNEL
            layers.append(
                {
                    "kind": "conv",
                    "K": _uniform(rng, (ch, in_ch, KERNEL, KERNEL), fan),
                    "b": _uniform(rng, (ch,), fan),
                }
            )
            layers.append({"kind": "relu"})
            in_ch = ch
    else:  # ResN: blocks of two convs with a skip; first block projects channels
        in_ch = c
        for bi in range(depth):
            fan1 = in_ch * KERNEL * KERNEL
            fan2 = ch * KERNEL * KERNEL
            block = {
                "kind": "res",
                "K1": _uniform(rng, (ch, in_ch, KERNEL, KERNEL), fan1),
                "b1": _uniform(rng, (ch,), fan1),
                "K2": _uniform(rng, (ch, ch, KERNEL, KERNEL), fan2),
                "b2": _uniform(rng, (ch,), fan2),
            }
            if in_ch != ch:
                block["Kp"] = _uniform(rng, (ch, in_ch, 1, 1), in_ch)
                block["bp"] = np.zeros(ch)
            layers.append(block)
            in_ch = ch
    n = ch * h * w
    layers.append({"kind": "linear", "W": _uniform(rng, (d, n), n), "b": _uniform(rng, (d,), n)})
    return layers


def build_model(
    structure=None,
    class_names=("zero", "one"),
    peft_mode="SoftPrompt",
    seed=0,
    image_hw=(28, 28),
    channels=1,
    embed_dim=512,
    prompt_tokens=1,
    text_hidden=4096,
    text_layers=2,
    adapter_hidden=None,
    adapter_activation=None,
    logit_scale=100.0,
    normalize_features=True,
    image_mlp_layers=2,
) -> MultimodalModel:
    """Construct a victim model with seeded uniform(+-1/sqrt(fan_in)) weights."""
    if structure is None:
        structure = EncoderStructure()
    class_names = list(class_names)
    rng = np.random.default_rng(seed)
    d = structure.feature_dim
    image_shape = (channels, image_hw[0], image_hw[1])

    image_layers = _build_image_layers(rng, structure, image_shape, image_mlp_layers)

    vocab = build_vocab(class_names)
    embedding = rng.uniform(-EMBED_INIT_SCALE, EMBED_INIT_SCALE, size=(len(vocab) + HASH_BUCKETS, embed_dim))
    prompt = SoftPrompt(rng.uniform(-PROMPT_INIT_SCALE, PROMPT_INIT_SCALE, size=(prompt_tokens, embed_dim)))

    if text_layers < 1:
        raise ValueError("text MLP needs at least one layer")
    text_mlp = []
    dims = [embed_dim] + [text_hidden] * (text_layers - 1) + [d]
    for i in range(text_layers):
        text_mlp.append((_uniform(rng, (dims[i + 1], dims[i]), dims[i]), np.zeros(dims[i + 1])))
    if text_layers > 1:
        w1 = text_mlp[0][0]
        pooled = []
        for name in class_names:
            rows = embedding[token_ids(name, vocab)]
            seq = np.vstack([prompt.values, rows]) if prompt.values.size else rows
            pooled.append(seq.mean(axis=0))
        z = np.stack([w1 @ p for p in pooled])
        # keep at least a handful of active units per class so no text
        # feature collapses to zero
        keep = max(2, text_hidden // 16)
        floor = min(float(np.sort(zi)[-keep]) for zi in z)
        thr = min(TEXT_SELECTIVITY * float(z.std()), floor)
        text_mlp[0] = (w1, np.full(dims[1], -thr))

    if adapter_activation is None:
        adapter_activation = "softplus" if peft_mode == "DoubleAdapter" else "relu"
    ah = adapter_hidden if adapter_hidden is not None else max(d // 4, 1)

    def make_adapter(placement):
        return Adapter(
            W1=_uniform(rng, (ah, d), d),
            b1=_uniform(rng, (ah,), d),
            W2=_uniform(rng, (d, ah), ah),
            b2=_uniform(rng, (d,), ah),
            activation=adapter_activation,
            placement=placement,
        )

    text_adapter = make_adapter("text") if peft_mode in ("TextAdapter", "DoubleAdapter") else None
    image_adapter = make_adapter("image") if peft_mode == "DoubleAdapter" else None

    return MultimodalModel(
        structure=structure,
        image_layers=image_layers,
        embedding=embedding,
        text_mlp=text_mlp,
        soft_prompt=prompt,
        text_adapter=text_adapter,
        image_adapter=image_adapter,
        logit_scale=float(logit_scale),
        class_names=class_names,
        peft_mode=peft_mode,
        image_shape=image_shape,
        vocab=vocab,
        seed=seed,
        normalize_features=normalize_features,
    )


# ---------------------------------------------------------------------------
# graph builders
# ---------------------------------------------------------------------------


def _affine(g: Graph, w: Node, x: Node, b: Node) -> Node:
    return g.apply("add", g.apply("matmul", w, x), b)


def adapter_graph(g: Graph, adapter: Adapter, x: Node, params: dict | None = None) -> Node:
    """Two affine layers, each followed by the adapter's activation."""
    p = params or {k: g.constant(v) for k, v in adapter.tensors().items()}
    act = adapter.activation
    h = g.apply(act, _affine(g, p["W1"], x, p["b1"]))
    return g.apply(act, _affine(g, p["W2"], h, p["b2"]))


def text_features_graph(
    g: Graph,
    model: MultimodalModel,
    prompt: Node | None = None,
    adapter_params: dict | None = None,
    prompt_values: Array | None = None,
    adapter_values: dict | None = None,
) -> Node:
    """Per-class text features as a [C, feature_dim] node.

    Pass `prompt` / `adapter_params` nodes to make those parameters
    differentiable; pass `*_values` to evaluate at non-model parameter
    values (reverse estimation). Otherwise the model's own values are baked
    in as constants.
    """
    if prompt is None:
        pv = prompt_values if prompt_values is not None else model.soft_prompt.values
        prompt = g.constant(pv) if pv.size else None
    mlp = [(g.constant(w), g.constant(b)) for (w, b) in model.text_mlp]
    ad = model.text_adapter
    ad_params = adapter_params
    if ad is not None and ad_params is None:
        vals = adapter_values if adapter_values is not None else ad.tensors()
        ad_params = {k: g.constant(v) for k, v in vals.items()}

    rows = []
    for i in range(model.num_classes):
        toks = g.constant(model.class_token_rows(i))
        seq = g.apply("concat", prompt, toks) if prompt is not None else toks
        x = g.apply("mean-pool", seq)
        for li, (w, b) in enumerate(mlp):
            x = _affine(g, w, x, b)
            if li + 1 < len(mlp):
                x = g.apply("relu", x)
        if ad is not None:
            x = adapter_graph(g, ad, x, ad_params)
        if model.normalize_features:
            x = g.apply("l2-normalize", x)
        rows.append(g.apply("reshape", x, shape=(1, model.feature_dim)))
    tf = rows[0]
    for r in rows[1:]:
        tf = g.apply("concat", tf, r)
    return tf


def image_feature_graph(
    g: Graph,
    model: MultimodalModel,
    x: Node,
    adapter_params: dict | None = None,
) -> dict:
    """Image branch: returns {"raw": pre-adapter feature, "feature": IF} nodes."""
    c = model.image_shape[0]
    if len(x.shape) == 2:
        if c != 1:
            raise ValueError("2-D image fed to a %d-channel encoder" % c)
        x = g.apply("reshape", x, shape=(1,) + x.shape)
    for layer in model.image_layers:
        kind = layer["kind"]
        if kind == "conv":
            x = g.apply("conv2d", x, g.constant(layer["K"]), g.constant(layer["b"]))
        elif kind == "relu":
            x = g.apply("relu", x)
        elif kind == "res":
            y = g.apply("conv2d", x, g.constant(layer["K1"]), g.constant(layer["b1"]))
            y = g.apply("relu", y)
            y = g.apply("conv2d", y, g.constant(layer["K2"]), g.constant(layer["b2"]))
            skip = x
            if "Kp" in layer:
                skip = g.apply("conv2d", x, g.constant(layer["Kp"]), g.constant(layer["bp"]))
            x = g.apply("relu", g.apply("add", y, skip))
        elif kind == "linear":
            flat = g.apply("reshape", x, shape=(int(np.prod(x.shape)),))
            x = _affine(g, g.constant(layer["W"]), flat, g.constant(layer["b"]))
        else:
            raise ValueError("unknown image layer kind %r" % kind)
    raw = x
    if model.image_adapter is not None:
        ap = adapter_params
        if ap is None:
            ap = {k: g.constant(v) for k, v in model.image_adapter.tensors().items()}
        x = adapter_graph(g, model.image_adapter, x, ap)
    if model.normalize_features:
        x = g.apply("l2-normalize", x)
    return {"raw": raw, "feature": x}


def logits_graph(g: Graph, model: MultimodalModel, tf: Node, image_feature: Node) -> Node:
    return g.apply("scale", g.apply("matmul", tf, image_feature), factor=model.logit_scale)


# ---------------------------------------------------------------------------
# public forward ops
# ---------------------------------------------------------------------------


def _check_image(model: MultimodalModel, x: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    c, h, w = model.image_shape
    if x.shape not in ((h, w), (c, h, w)):
        raise ValueError(
            "image shape %s does not match the encoder's configured input %s"
            % (x.shape, (c, h, w))
        )
    if x.min() < -1e-9 or x.max() > 1.0 + 1e-9:
        raise ValueError("pixel values must lie in [0,1]")
    return x


def encode_image(model: MultimodalModel, x: Array) -> Array:
    """l2-normalized image feature of shape [feature_dim]."""
    x = _check_image(model, x)
    g = Graph()
    return image_feature_graph(g, model, g.constant(x))["feature"].value


def encode_text(model: MultimodalModel) -> Array:
    """Per-class l2-normalized text features, shape [C, feature_dim]."""
    g = Graph()
    return text_features_graph(g, model).value


def logits(image_feature: Array, text_features: Array, logit_scale: float) -> Array:
    image_feature = np.asarray(image_feature, dtype=np.float64)
    text_features = np.asarray(text_features, dtype=np.float64)
    if logit_scale <= 0:
        raise ValueError("logit scale must be positive")
    if text_features.ndim != 2 or text_features.shape[1] != image_feature.shape[0]:
        raise ValueError(
            "logits: text features %s do not align with image feature %s"
            % (text_features.shape, image_feature.shape)
        )
    return logit_scale * (text_features @ image_feature)


def loss(y: Array, gt: int) -> float:
    y = np.asarray(y, dtype=np.float64)
    if not 0 <= gt < y.shape[0]:
        raise ValueError("ground-truth index %d out of range" % gt)
    m = y.max()
    return float(m + np.log(np.exp(y - m).sum()) - y[gt])


def classification_loss_graph(
    g: Graph,
    model: MultimodalModel,
    x: Array,
    gt: int,
    prompt: Node | None = None,
    text_adapter_params: dict | None = None,
    image_adapter_params: dict | None = None,
):
    """Full forward graph to the cross-entropy loss; returns (loss, parts)."""
    tf = text_features_graph(g, model, prompt=prompt, adapter_params=text_adapter_params)
    feats = image_feature_graph(g, model, g.constant(x), adapter_params=image_adapter_params)
    y = logits_graph(g, model, tf, feats["feature"])
    out = g.apply("cross-entropy-with-index-target", y, target=int(gt))
    return out, {"tf": tf, "if": feats["feature"], "raw": feats["raw"], "logits": y}


def peft_grads(model: MultimodalModel, x: Array, gt: int) -> dict:
    """Exact loss gradients for the hot parameters only, keyed like hot_params."""
    x = _check_image(model, x)
    if not 0 <= gt < model.num_classes:
        raise ValueError("label %d out of range for %d classes" % (gt, model.num_classes))
    g = Graph()
    leaves = {}
    prompt = None
    text_ad = None
    image_ad = None
    if model.peft_mode == "SoftPrompt":
        prompt = g.leaf(model.soft_prompt.values)
        leaves["prompt"] = prompt
    else:
        text_ad = {k: g.leaf(v) for k, v in model.text_adapter.tensors().items()}
        leaves.update({"text_adapter." + k: v for k, v in text_ad.items()})
        if model.peft_mode == "DoubleAdapter":
            image_ad = {k: g.leaf(v) for k, v in model.image_adapter.tensors().items()}
            leaves.update({"image_adapter." + k: v for k, v in image_ad.items()})
    out, _ = classification_loss_graph(
        g, model, x, gt, prompt=prompt, text_adapter_params=text_ad, image_adapter_params=image_ad
    )
    grads = g.backward(out)
    return {name: grads[node] for name, node in leaves.items()}


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

MODEL_FORMAT_VERSION = "parvo-model-v1"


def _pack(a: Array) -> dict:
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unpack(d: dict) -> Array:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def model_to_dict(model: MultimodalModel) -> dict:
    def pack_adapter(ad):
        if ad is None:
            return None
        return {
            "W1": _pack(ad.W1),
            "b1": _pack(ad.b1),
            "W2": _pack(ad.W2),
            "b2": _pack(ad.b2),
            "activation": ad.activation,
            "placement": ad.placement,
        }

    return {
        "version": MODEL_FORMAT_VERSION,
        "structure": {"kind": model.structure.kind, "feature_dim": model.structure.feature_dim},
        "image_layers": [
            {k: (_pack(v) if isinstance(v, np.ndarray) else v) for k, v in layer.items()}
            for layer in model.image_layers
        ],
        "embedding": _pack(model.embedding),
        "text_mlp": [[_pack(w), _pack(b)] for (w, b) in model.text_mlp],
        "soft_prompt": _pack(model.soft_prompt.values),
        "text_adapter": pack_adapter(model.text_adapter),
        "image_adapter": pack_adapter(model.image_adapter),
        "logit_scale": model.logit_scale,
        "class_names": model.class_names,
        "peft_mode": model.peft_mode,
        "image_shape": list(model.image_shape),
        "seed": model.seed,
        "normalize_features": model.normalize_features,
    }


def model_from_dict(doc: dict) -> MultimodalModel:
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError(
            "unsupported model format version %r (expected %r)"
            % (doc.get("version"), MODEL_FORMAT_VERSION)
        )

    def unpack_adapter(d):
        if d is None:
            return None
        return Adapter(
            W1=_unpack(d["W1"]),
            b1=_unpack(d["b1"]),
            W2=_unpack(d["W2"]),
            b2=_unpack(d["b2"]),
            activation=d["activation"],
            placement=d["placement"],
        )

    return MultimodalModel(
        structure=EncoderStructure(**doc["structure"]),
        image_layers=[
            {k: (_unpack(v) if isinstance(v, dict) else v) for k, v in layer.items()}
            for layer in doc["image_layers"]
        ],
        embedding=_unpack(doc["embedding"]),
        text_mlp=[(_unpack(w), _unpack(b)) for w, b in doc["text_mlp"]],
        soft_prompt=SoftPrompt(_unpack(doc["soft_prompt"])),
        text_adapter=unpack_adapter(doc["text_adapter"]),
        image_adapter=unpack_adapter(doc["image_adapter"]),
        logit_scale=float(doc["logit_scale"]),
        class_names=list(doc["class_names"]),
        peft_mode=doc["peft_mode"],
        image_shape=tuple(doc["image_shape"]),
        vocab=build_vocab(doc["class_names"]),
        seed=doc["seed"],
        normalize_features=doc["normalize_features"],
    )


def save_model(model: MultimodalModel, path) -> None:
    with open(path, "w") as f:
        json.dump(model_to_dict(model), f)


def load_model(path) -> MultimodalModel:
    with open(path) as f:
        return model_from_dict(json.load(f))
