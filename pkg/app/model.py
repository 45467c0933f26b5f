"""
Shared-encoder, dual-decoder transformer.

One encoder feeds a causal generator decoder (next-token prediction through the shared
embedding) and a bidirectional discriminator decoder whose head scores every input token
with the probability that it is the ORIGINAL token. Blocks are pre-norm.
"""

import contextlib
import logging

import numpy as np

from app import autograd as ag
from app.config import DecoderChoice, ModelConfig
from app.errors import DataError
from app.vocab import BOS_ID

NEG_INF = -1e9
ATTN_PROJECTIONS = ("q", "k", "v", "o")
STACKS = {"encoder": "enc_layers", "generator": "gen_dec_layers", "discriminator": "disc_dec_layers"}
DETECTION_HEAD = "discriminator.head.weight"


class ModelParams:
    """
    Named tensors of θ_E, θ_G, θ_D and the detection head W_d.

    Args:
        tensors (dict): Parameter path -> Tensor, in creation order.
        config (ModelConfig): The configuration the tensors were built for.
    """

    def __init__(self, tensors, config):
        self._tensors = dict(tensors)
        self.config = config
        self._reads = None

    def __getitem__(self, name):
        if self._reads is not None:
            self._reads.add(name)
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def num_parameters(self):
        return int(sum(t.data.size for t in self._tensors.values()))

    def zero_grad(self):
        for tensor in self._tensors.values():
            tensor.zero_grad()

    @contextlib.contextmanager
    def track_reads(self):
        """Collects the names of every tensor looked up inside the block."""
        self._reads = set()
        try:
            yield self._reads
        finally:
            self._reads = None

    def replace(self, name, tensor):
        """Shallow copy with one tensor swapped (used to perturb a single parameter)."""
        if name not in self._tensors:
            raise KeyError(name)
        tensors = dict(self._tensors)
        tensors[name] = tensor
        return ModelParams(tensors, self.config)

    def astype(self, dtype):
        """Copy of every tensor cast to `dtype` (np.float64 for gradient checks)."""
        return ModelParams(
            {
                name: ag.Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=name)
                for name, t in self._tensors.items()
            },
            self.config,
        )

    def clone(self):
        return ModelParams(
            {
                name: ag.Tensor(t.data.copy(), requires_grad=t.requires_grad, name=name)
                for name, t in self._tensors.items()
            },
            self.config,
        )

    def state(self):
        """Parameter path -> numpy array, no copies."""
        return {name: t.data for name, t in self._tensors.items()}


def _attention_shapes(prefix, d):
    shapes = {}
    for proj in ATTN_PROJECTIONS:
        shapes[f"{prefix}.{proj}.weight"] = (d, d)
        shapes[f"{prefix}.{proj}.bias"] = (d,)
    return shapes


def _norm_shapes(prefix, d):
    return {f"{prefix}.gamma": (d,), f"{prefix}.beta": (d,)}


def parameter_shapes(config):
    """Every parameter path with its shape, in creation order."""
    d, f = config.d_model, config.ffn_dim
    shapes = {"embed.tokens": (config.vocab_size, d), "embed.positions": (config.max_positions, d)}
    if not config.tie_embeddings:
        shapes["output.weight"] = (config.vocab_size, d)
    for stack, count_field in STACKS.items():
        for i in range(getattr(config, count_field)):
            layer = f"{stack}.layers.{i}"
            shapes.update(_norm_shapes(f"{layer}.ln_self", d))
            shapes.update(_attention_shapes(f"{layer}.self_attn", d))
            if stack != "encoder":
                shapes.update(_norm_shapes(f"{layer}.ln_cross", d))
                shapes.update(_attention_shapes(f"{layer}.cross_attn", d))
            shapes.update(_norm_shapes(f"{layer}.ln_ffn", d))
            shapes[f"{layer}.ffn.fc1.weight"] = (d, f)
            shapes[f"{layer}.ffn.fc1.bias"] = (f,)
            shapes[f"{layer}.ffn.fc2.weight"] = (f, d)
            shapes[f"{layer}.ffn.fc2.bias"] = (d,)
        shapes.update(_norm_shapes(f"{stack}.ln_final", d))
    shapes[DETECTION_HEAD] = (d, 1)
    return shapes


def parameter_census(config):
    """
    Parameter counts from the closed-form formula for `config`.

    Returns:
        dict: counts for embeddings, each stack, the head, and the total.
    """
    d, f, V, P = config.d_model, config.ffn_dim, config.vocab_size, config.max_positions
    attention = 4 * (d * d + d)
    norm = 2 * d
    ffn = d * f + f + f * d + d
    encoder_layer = attention + 2 * norm + ffn
    decoder_layer = 2 * attention + 3 * norm + ffn
    census = {
        "embeddings": V * d + P * d + (0 if config.tie_embeddings else V * d),
        "encoder": config.enc_layers * encoder_layer + norm,
        "generator": config.gen_dec_layers * decoder_layer + norm,
        "discriminator": config.disc_dec_layers * decoder_layer + norm,
        "detection_head": d,
    }
    census["total"] = sum(census.values())
    return census


def shape_manifest(params):
    """Parameter path -> shape list, for checkpoint validation."""
    return {name: list(tensor.shape) for name, tensor in params.items()}


def init_params(config, seed=0):
    """
    Fresh parameters: normal(0, init_std) matrices, zero biases, unit layer-norm gains.

    Args:
        config (ModelConfig): Must carry vocab_size.
        seed (int): Seed for the initialiser.

    Returns:
        ModelParams: Float32 tensors with requires_grad set.
    """
    if config.vocab_size is None:
        raise DataError("model config needs vocab_size before parameters can be created")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gamma"):
            values = np.ones(shape)
        elif name.endswith(".bias") or name.endswith(".beta"):
            values = np.zeros(shape)
        else:
            values = rng.normal(0.0, config.init_std, size=shape)
        tensors[name] = ag.Tensor(values.astype(np.float32), requires_grad=True, name=name)
    params = ModelParams(tensors, config)
    logging.info(f"Initialised {params.num_parameters():,} parameters in {len(params)} tensors")
    return params


# --- building blocks -------------------------------------------------------------------


def _linear(x, params, name):
    return x @ params[f"{name}.weight"] + params[f"{name}.bias"]


def _norm(x, params, name):
    return ag.layer_norm(x, params[f"{name}.gamma"], params[f"{name}.beta"], eps=params.config.layer_norm_eps)


def _split_heads(x, n_heads):
    rows, length, width = x.shape
    return x.reshape(rows, length, n_heads, width // n_heads).transpose(0, 2, 1, 3)


def _attention(x_q, x_kv, params, name, key_mask, causal, training, rng):
    config = params.config
    rows, q_len, width = x_q.shape
    k_len = x_kv.shape[1]
    q = _split_heads(_linear(x_q, params, f"{name}.q"), config.n_heads)
    k = _split_heads(_linear(x_kv, params, f"{name}.k"), config.n_heads)
    v = _split_heads(_linear(x_kv, params, f"{name}.v"), config.n_heads)

    scores = ag.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / np.sqrt(config.head_dim))
    blocked = ~np.asarray(key_mask, dtype=bool)[:, None, None, :]
    if causal:
        blocked = blocked | np.triu(np.ones((q_len, k_len), dtype=bool), k=1)[None, None]
    weights = ag.softmax(ag.masked_fill(scores, blocked, NEG_INF), axis=-1)
    weights = ag.dropout(weights, config.dropout, rng, training)
    context = (weights @ v).transpose(0, 2, 1, 3).reshape(rows, q_len, width)
    return _linear(context, params, f"{name}.o")


def _feed_forward(x, params, name):
    hidden = ag.gelu(_linear(x, params, f"{name}.fc1"))
    return _linear(hidden, params, f"{name}.fc2")


def _embed(ids, params, training, rng):
    config = params.config
    length = ids.shape[1]
    if length > config.max_positions:
        raise DataError(f"sequence of {length} tokens exceeds max_positions={config.max_positions}")
    tokens = ag.embedding_gather(params["embed.tokens"], ids)
    positions = ag.embedding_gather(params["embed.positions"], np.arange(length))
    return ag.dropout(tokens + positions, config.dropout, rng, training)


def _residual(x, update, params, training, rng):
    return x + ag.dropout(update, params.config.dropout, rng, training)


def _check_rng(training, rng):
    if training and rng is None:
        raise ValueError("training mode needs an rng for dropout")


def _as_ids(ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    return ids


def _full_mask(ids, mask):
    return np.ones(ids.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)


# --- public forward passes -------------------------------------------------------------


def encode(src_ids, pad_mask, params, training=False, rng=None):
    """
    Runs the shared encoder θ_E.

    Args:
        src_ids (np.ndarray): [rows, src_len] token ids.
        pad_mask (np.ndarray): [rows, src_len], True on real tokens; None means all real.
        params (ModelParams): Model parameters.
        training (bool): Enables dropout.
        rng (np.random.Generator): Dropout randomness, required when training.

    Returns:
        Tensor: H_e of shape [rows, src_len, d_model].
    """
    _check_rng(training, rng)
    src_ids = _as_ids(src_ids)
    pad_mask = _full_mask(src_ids, pad_mask)
    h = _embed(src_ids, params, training, rng)
    for i in range(params.config.enc_layers):
        layer = f"encoder.layers.{i}"
        normed = _norm(h, params, f"{layer}.ln_self")
        h = _residual(h, _attention(normed, normed, params, f"{layer}.self_attn", pad_mask, False, training, rng),
                      params, training, rng)
        h = _residual(h, _feed_forward(_norm(h, params, f"{layer}.ln_ffn"), params, f"{layer}.ffn"),
                      params, training, rng)
    return _norm(h, params, "encoder.ln_final")


def _decoder_stack(stack, H_e, input_ids, params, src_mask, trg_mask, causal, training, rng):
    input_ids = _as_ids(input_ids)
    trg_mask = _full_mask(input_ids, trg_mask)
    src_mask = np.ones(H_e.shape[:2], dtype=bool) if src_mask is None else np.asarray(src_mask, dtype=bool)
    h = _embed(input_ids, params, training, rng)
    for i in range(getattr(params.config, STACKS[stack])):
        layer = f"{stack}.layers.{i}"
        normed = _norm(h, params, f"{layer}.ln_self")
        h = _residual(h, _attention(normed, normed, params, f"{layer}.self_attn", trg_mask, causal, training, rng),
                      params, training, rng)
        h = _residual(h, _attention(_norm(h, params, f"{layer}.ln_cross"), H_e, params, f"{layer}.cross_attn",
                                    src_mask, False, training, rng),
                      params, training, rng)
        h = _residual(h, _feed_forward(_norm(h, params, f"{layer}.ln_ffn"), params, f"{layer}.ffn"),
                      params, training, rng)
    return _norm(h, params, f"{stack}.ln_final")


def output_projection(hidden, params):
    """Vocabulary logits through the shared embedding (or the untied output matrix)."""
    weight = params["embed.tokens"] if params.config.tie_embeddings else params["output.weight"]
    return hidden @ weight.transpose(1, 0)


def decoder_logits(H_e, input_ids, params, decoder=DecoderChoice.GENERATOR, src_mask=None, trg_mask=None,
                   training=False, rng=None):
    """
    Causal pass through either decoder stack, projected to vocabulary logits.

    The generator stack is the usual choice; the discriminator stack is used when replaced
    token denoising or a D-mode fine-tuned model routes generation through θ_D.
    """
    _check_rng(training, rng)
    stack = DecoderChoice(decoder).value
    hidden = _decoder_stack(stack, H_e, input_ids, params, src_mask, trg_mask, True, training, rng)
    return output_projection(hidden, params)


def generator_decode(H_e, trg_input_ids, params, src_mask=None, trg_mask=None, training=False, rng=None):
    """
    Runs the causal generator decoder θ_G.

    Args:
        H_e (Tensor): Encoder states [rows, src_len, d_model].
        trg_input_ids (np.ndarray): [rows, trg_len], each row starting with [BOS].
        params (ModelParams): Model parameters.
        src_mask (np.ndarray): Encoder pad mask, True on real tokens.
        trg_mask (np.ndarray): Decoder pad mask, True on real tokens.

    Returns:
        Tensor: Logits [rows, trg_len, vocab_size].
    """
    trg_input_ids = _as_ids(trg_input_ids)
    if not np.all(trg_input_ids[:, 0] == BOS_ID):
        raise DataError("generator input rows must start with [BOS]")
    return decoder_logits(H_e, trg_input_ids, params, DecoderChoice.GENERATOR, src_mask, trg_mask, training, rng)


def discriminator_decode(H_e, sampled_trg_ids, params, src_mask=None, trg_mask=None, training=False, rng=None):
    """
    Runs the bidirectional discriminator decoder θ_D on an unshifted sampled target.

    Returns:
        tuple: (H_d [rows, trg_len, d_model], V [rows, trg_len]) where V is the probability
            that each token is ORIGINAL.
    """
    _check_rng(training, rng)
    sampled_trg_ids = _as_ids(sampled_trg_ids)
    hidden = _decoder_stack("discriminator", H_e, sampled_trg_ids, params, src_mask, trg_mask, False, training, rng)
    logits = hidden @ params[DETECTION_HEAD]
    probabilities = ag.sigmoid(logits.reshape(sampled_trg_ids.shape))
    return hidden, probabilities


def model_config_for(vocab, base=None):
    """`base` (or the desk default) with vocab_size taken from `vocab`."""
    base = base or ModelConfig()
    return base.model_copy(update={"vocab_size": len(vocab)})
