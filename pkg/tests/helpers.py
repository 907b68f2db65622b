"""Shared fixtures: per-op gradient-check graphs and pure-Python tower oracles."""

import math

import numpy as np

from twostage_clip import encoders as E
from twostage_clip import tensor as T
from twostage_clip.contrastive import BatchEmbeddings, contrastive_loss
from twostage_clip.tensor import BatchNormState, Tensor


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _weighted(make, rng):
    """Reduce an op output to a scalar through a fixed random weighting."""
    w = None

    def loss():
        nonlocal w
        out = make()
        if w is None:
            w = rng.normal(size=out.shape)
        return (out * w).sum()

    loss()
    return loss


def _away_from(values, edges, margin=1e-3):
    for e in edges:
        near = np.abs(values - e) < margin
        values[near] = e + np.where(values[near] >= e, margin, -margin) * 2
    return values


def build_matmul(rng):
    a, b = _param(rng, 3, 4), _param(rng, 4, 2)
    return {"a": a, "b": b}, _weighted(lambda: a @ b, rng)


def build_batched_matmul(rng):
    a, b = _param(rng, 2, 3, 4), _param(rng, 4, 5)
    return {"a": a, "b": b}, _weighted(lambda: a @ b, rng)


def build_add(rng):
    a, b = _param(rng, 3, 4), _param(rng, 4)
    return {"a": a, "b": b}, _weighted(lambda: a + b, rng)


def build_mul(rng):
    a, b = _param(rng, 2, 3), _param(rng, 2, 1)
    return {"a": a, "b": b}, _weighted(lambda: T.mul(a, b), rng)


def build_scale(rng):
    a = _param(rng, 5)
    return {"a": a}, _weighted(lambda: a * -2.5, rng)


def build_layer_norm(rng):
    x, g, b = _param(rng, 3, 5), _param(rng, 5), _param(rng, 5)
    return {"x": x, "gain": g, "bias": b}, _weighted(lambda: T.layer_norm(x, g, b), rng)


def build_batch_norm_train(rng):
    x, g, b = _param(rng, 6, 3), _param(rng, 3), _param(rng, 3)
    state = BatchNormState.fresh(3)
    state.update_stats = False
    return {"x": x, "gain": g, "bias": b}, _weighted(
        lambda: T.batch_norm(x, g, b, state, training=True), rng)


def build_batch_norm_eval(rng):
    x, g, b = _param(rng, 2, 2, 2, 3), _param(rng, 3), _param(rng, 3)
    state = BatchNormState(rng.normal(size=3), rng.uniform(0.5, 2.0, size=3))
    return {"x": x, "gain": g, "bias": b}, _weighted(
        lambda: T.batch_norm(x, g, b, state, training=False), rng)


def build_gelu(rng):
    x = _param(rng, 7)
    return {"x": x}, _weighted(lambda: T.gelu(x), rng)


def build_softmax(rng):
    x = _param(rng, 3, 4)
    return {"x": x}, _weighted(lambda: T.softmax(x, axis=-1), rng)


def build_log_softmax(rng):
    x = _param(rng, 4, 3)
    return {"x": x}, _weighted(lambda: T.log_softmax(x, axis=0), rng)


def build_embedding(rng):
    w = _param(rng, 5, 3)
    ids = rng.integers(0, 5, size=(2, 4))
    return {"weight": w}, _weighted(lambda: T.embedding(w, ids), rng)


def build_concatenate(rng):
    a, b = _param(rng, 2, 3), _param(rng, 2, 2)
    return {"a": a, "b": b}, _weighted(lambda: T.concatenate([a, b], axis=1), rng)


def build_slice(rng):
    x = _param(rng, 4, 5)
    return {"x": x}, _weighted(lambda: x[1:3, ::2], rng)


def build_gather(rng):
    x = _param(rng, 3, 3)
    rows, cols = np.array([0, 2, 2, 1]), np.array([1, 0, 0, 2])
    return {"x": x}, _weighted(lambda: x[rows, cols], rng)


def build_mean(rng):
    x = _param(rng, 3, 4)
    return {"x": x}, _weighted(lambda: x.mean(axis=1), rng)


def build_sum(rng):
    x = _param(rng, 2, 3, 2)
    return {"x": x}, _weighted(lambda: x.sum(axis=(0, 2), keepdims=True), rng)


def build_l2_normalize(rng):
    x = _param(rng, 3, 4)
    return {"x": x}, _weighted(lambda: T.l2_normalize(x, axis=-1), rng)


def build_exp(rng):
    x = _param(rng, 6)
    return {"x": x}, _weighted(lambda: T.exp(x), rng)


def build_clamp(rng):
    x = _param(rng, 8)
    x.data = _away_from(x.data, (-0.5, 0.5))
    return {"x": x}, _weighted(lambda: T.clamp(x, -0.5, 0.5), rng)


def build_reshape_transpose(rng):
    x = _param(rng, 2, 6)
    return {"x": x}, _weighted(lambda: x.reshape(2, 3, 2).transpose(2, 0, 1), rng)


OP_BUILDERS = {
    "matmul": build_matmul,
    "batched_matmul": build_batched_matmul,
    "add": build_add,
    "mul": build_mul,
    "scale": build_scale,
    "layer_norm": build_layer_norm,
    "batch_norm_train": build_batch_norm_train,
    "batch_norm_eval": build_batch_norm_eval,
    "gelu": build_gelu,
    "softmax": build_softmax,
    "log_softmax": build_log_softmax,
    "embedding": build_embedding,
    "concatenate": build_concatenate,
    "slice": build_slice,
    "gather": build_gather,
    "mean": build_mean,
    "sum": build_sum,
    "l2_normalize": build_l2_normalize,
    "exp": build_exp,
    "clamp": build_clamp,
    "reshape_transpose": build_reshape_transpose,
}


# ---------------------------------------------------------------------------
# tiny towers


def tiny_text_config(**kw):
    base = dict(kind="text_transformer", layers=1, width=8, heads=2, embed_dim=4,
                vocab_size=16, max_text_length=6)
    base.update(kw)
    return E.EncoderConfig(**base)


def tiny_image_config(kind="patch_transformer", **kw):
    if kind == "patch_transformer":
        base = dict(kind=kind, layers=1, width=8, heads=2, embed_dim=4, patch_size=2, resolution=4)
    else:
        base = dict(kind=kind, layers=2, width=4, heads=1, embed_dim=4, patch_size=2, resolution=8)
    base.update(kw)
    return E.EncoderConfig(**base)


def two_tower_builder(kind="patch_transformer", batch=4):
    def build(rng):
        model = E.random_model(tiny_image_config(kind), tiny_text_config(),
                               int(rng.integers(0, 2**31)))
        for s in model.bn_states.values():
            s.update_stats = False
        # O(1) features keep the check away from the normalize guard's regime
        for name in ("image_projection", "text_projection"):
            w = model.params[name]
            w.data = rng.normal(size=w.shape) / np.sqrt(w.shape[0])
        r = model.image_config.resolution
        pixels = rng.random((batch, r, r, 3))
        ids = rng.integers(4, 16, size=(batch, 6))
        ids[:, 0] = 1
        lengths = rng.integers(2, 7, size=batch)
        mask = np.arange(6)[None, :] < lengths[:, None]
        ids[~mask] = 0

        def loss():
            img = E.encode_images(model, pixels, training=True)
            txt = E.encode_texts(model, ids, mask)
            return contrastive_loss(BatchEmbeddings(img, txt), model.params["logit_scale"])

        return dict(model.params), loss

    return build


def text_tower_builder(width=16):
    def build(rng):
        cfg = tiny_text_config(width=width, heads=4, layers=2, vocab_size=20, max_text_length=8)
        model = E.random_model(tiny_image_config(), cfg, int(rng.integers(0, 2**31)))
        ids = rng.integers(4, 20, size=(3, 8))
        ids[:, 0] = 1
        ids[1, 5:] = 0
        w = rng.normal(size=(3, cfg.embed_dim))
        params = {n: p for n, p in model.params.items() if n.startswith("text")}
        return params, lambda: (E.encode_texts(model, ids) * w).sum()

    return build


# ---------------------------------------------------------------------------
# scalar oracles (plain Python floats and lists)


def _vec(a):
    return [float(v) for v in np.asarray(a).reshape(-1)]


def _mat(a):
    return [[float(v) for v in row] for row in np.asarray(a)]


def o_vecmat(v, m):
    return [sum(v[i] * m[i][j] for i in range(len(v))) for j in range(len(m[0]))]


def o_layer_norm(v, gain, bias, eps=1e-5):
    n = len(v)
    mu = sum(v) / n
    var = sum((x - mu) ** 2 for x in v) / n
    return [(x - mu) / math.sqrt(var + eps) * gain[i] + bias[i] for i, x in enumerate(v)]


def o_gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def o_normalize(v):
    n = math.sqrt(sum(x * x for x in v) + 1e-12)
    return [x / n for x in v]


def o_block(xs, P, prefix, heads, keep):
    """One pre-norm transformer block over a list of token vectors."""
    W = len(xs[0])
    D = W // heads
    g = lambda k: P[f"{prefix}.{k}"]
    h = [o_layer_norm(x, _vec(g("ln1.gain")), _vec(g("ln1.bias"))) for x in xs]
    qkv_w, qkv_b = _mat(g("attn.qkv.weight")), _vec(g("attn.qkv.bias"))
    qkv = [[a + b for a, b in zip(o_vecmat(t, qkv_w), qkv_b)] for t in h]
    q = [t[:W] for t in qkv]
    k = [t[W:2 * W] for t in qkv]
    v = [t[2 * W:] for t in qkv]
    attended = []
    for i in range(len(xs)):
        row = []
        for hd in range(heads):
            sl = slice(hd * D, (hd + 1) * D)
            scores = []
            for j in range(len(xs)):
                s = sum(a * b for a, b in zip(q[i][sl], k[j][sl])) / math.sqrt(D)
                scores.append(s if keep[j] else -math.inf)
            top = max(scores)
            ex = [math.exp(s - top) for s in scores]
            tot = sum(ex)
            for d in range(D):
                row.append(sum(ex[j] / tot * v[j][sl][d] for j in range(len(xs))))
        attended.append(row)
    out_w, out_b = _mat(g("attn.out.weight")), _vec(g("attn.out.bias"))
    xs = [[x + a + b for x, a, b in zip(xs[i], o_vecmat(attended[i], out_w), out_b)]
          for i in range(len(xs))]
    fc_w, fc_b = _mat(g("mlp.fc.weight")), _vec(g("mlp.fc.bias"))
    pr_w, pr_b = _mat(g("mlp.proj.weight")), _vec(g("mlp.proj.bias"))
    new = []
    for x in xs:
        h = o_layer_norm(x, _vec(g("ln2.gain")), _vec(g("ln2.bias")))
        hid = [o_gelu(a + b) for a, b in zip(o_vecmat(h, fc_w), fc_b)]
        new.append([xi + a + b for xi, a, b in zip(x, o_vecmat(hid, pr_w), pr_b)])
    return new


def oracle_text(model, ids, keep):
    P = {n: p.data for n, p in model.params.items()}
    cfg = model.text_config
    tok, pos = _mat(P["text.token_embedding"]), _mat(P["text.positional_embedding"])
    xs = [[a + b for a, b in zip(tok[t], pos[i])] for i, t in enumerate(ids)]
    for layer in range(cfg.layers):
        xs = o_block(xs, P, f"text.blocks.{layer}", cfg.heads, keep)
    first = o_layer_norm(xs[0], _vec(P["text.ln_final.gain"]), _vec(P["text.ln_final.bias"]))
    return o_normalize(o_vecmat(first, _mat(P["text_projection"])))


def oracle_image(model, pixels):
    P = {n: p.data for n, p in model.params.items()}
    cfg = model.image_config
    p, g = cfg.patch_size, cfg.grid
    px = [[[(float(pixels[i][j][c]) - 0.5) / 0.25 for c in range(3)]
           for j in range(cfg.resolution)] for i in range(cfg.resolution)]
    embed = _mat(P["image.patch_embed"])
    tokens = [_vec(P["image.class_embedding"])]
    for pi in range(g):
        for pj in range(g):
            flat = [px[pi * p + di][pj * p + dj][c]
                    for di in range(p) for dj in range(p) for c in range(3)]
            tokens.append(o_vecmat(flat, embed))
    pos = _mat(P["image.positional_embedding"])
    xs = [[a + b for a, b in zip(t, pos[i])] for i, t in enumerate(tokens)]
    xs = [o_layer_norm(x, _vec(P["image.ln_pre.gain"]), _vec(P["image.ln_pre.bias"])) for x in xs]
    for layer in range(cfg.layers):
        xs = o_block(xs, P, f"image.blocks.{layer}", cfg.heads, [True] * len(xs))
    cls = o_layer_norm(xs[0], _vec(P["image.ln_post.gain"]), _vec(P["image.ln_post.bias"]))
    return o_normalize(o_vecmat(cls, _mat(P["image_projection"])))


# ---------------------------------------------------------------------------
# small training setups


def small_model(kind="conv_net", seed=0):
    """Desk-fast towers: 16-pixel images, width-16 text, 24-token captions."""
    if kind == "conv_net":
        img = E.default_conv_config(layers=2, width=8, patch_size=4, resolution=16, embed_dim=8)
    else:
        img = E.default_image_config(layers=1, width=16, heads=2, patch_size=4, resolution=16,
                                     embed_dim=8)
    txt = E.default_text_config(layers=1, width=16, heads=2, max_text_length=24, embed_dim=8)
    return E.init_model(img, txt, seed)


def tensor_hash(model, prefix):
    import hashlib

    h = hashlib.sha256()
    for name in sorted(model.params):
        if name.startswith(prefix):
            h.update(name.encode() + model.params[name].data.tobytes())
    if prefix == "image.":
        for name in sorted(model.bn_states):
            s = model.bn_states[name]
            h.update(name.encode() + s.running_mean.tobytes() + s.running_var.tobytes())
    return h.hexdigest()


def two_stage_learning_run(out_dir, steps=(200, 200), lrs=(1e-3, 2e-4), seed=0):
    """Stage 1 then stage 2 on the 256-pair planted corpus (192 train / 64 eval).

    Returns mean recall (text to image, label-level gold) on the eval split at
    init, after each stage, a shuffled-embedding baseline, and both loss logs.
    """
    import time
    from pathlib import Path

    from twostage_clip import evaluation as V
    from twostage_clip.synthetic import gold_by_label, planted_corpus
    from twostage_clip.trainer import Trainer, TrainingSchedule, switch_stage

    start = time.perf_counter()
    records, labels = planted_corpus(256, seed)
    train, held = records[:192], records[192:]
    gold = gold_by_label(labels[192:], labels[192:])
    pixels = np.stack([r.pixels() for r in held]).astype(np.float64)
    captions = [r.caption for r in held]

    def evaluate(model):
        images, texts = V.embed_images(model, pixels), V.embed_texts(model, captions)
        return V.retrieval_eval(images, texts, gold, "text_to_image").mean_recall, images, texts

    model = E.init_model(E.default_image_config(),
                         E.default_text_config(max_text_length=24), seed)
    out = {"init": evaluate(model)[0]}
    one = TrainingSchedule(stage=1, total_steps=steps[0], warmup_steps=steps[0] // 10,
                           peak_lr=lrs[0])
    res1 = Trainer(model, one).run(train, seed, Path(out_dir) / "stage1")
    out["stage1"] = evaluate(model)[0]
    two = TrainingSchedule(stage=2, total_steps=steps[1], warmup_steps=steps[1] // 10,
                           peak_lr=lrs[1])
    trainer = switch_stage(res1.checkpoint, two)
    res2 = trainer.run(train, seed + 1, Path(out_dir) / "stage2")
    out["stage2"], images, texts = evaluate(trainer.model)
    rng = np.random.default_rng(seed)
    out["random"] = float(np.mean([
        V.retrieval_eval(images, texts[rng.permutation(len(texts))], gold,
                         "text_to_image").mean_recall for _ in range(20)]))
    out["losses"] = (res1.losses, res2.losses)
    out["model"] = trainer.model
    out["seconds"] = time.perf_counter() - start
    return out
