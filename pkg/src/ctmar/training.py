"""Adam optimizer, sample preparation, and the joint training loop.

Per-sample constants (network inputs, corrupted reconstruction, targets)
are precomputed once; each step stacks a shuffled batch, runs the
pipeline, and applies one Adam update. Loss history rows go to a CSV so
runs can be compared offline.
"""

import csv

import numpy as np

from .losses import FeatureExtractor, normalize_mu, restoration_loss, total_loss
from .networks import replace_and_recon, sino_input
from .projector import fbp
from .tensor import Tensor, no_grad


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.5, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def prepare_sample(sample, geom, mode):
    """Precompute one sample's network inputs and targets (all f32)."""
    s_mc = np.asarray(sample.s_mc, np.float32)
    trace = (np.asarray(sample.trace) > 0).astype(np.float32)
    x_mc = fbp(s_mc.astype(np.float64), geom)
    return {
        "sino_in": sino_input(sample.s_mc, sample.trace, sample.mask_proj, mode).astype(np.float32),
        "s_mc": s_mc[None],
        "trace": trace[None],
        "x_mc": normalize_mu(x_mc).astype(np.float32)[None],
        "s_gt": np.asarray(sample.s_gt, np.float32)[None],
        "x_gt": normalize_mu(np.asarray(sample.x_gt)).astype(np.float32)[None],
    }


def prepare_batch(prepped, idxs):
    return {k: np.stack([prepped[i][k] for i in idxs]) for k in prepped[0]}


def _batches(n, batch_size, steps, rng):
    order = []
    while len(order) < steps * batch_size:
        order.extend(rng.permutation(n))
    for s in range(steps):
        yield order[s * batch_size : (s + 1) * batch_size]


def write_history_csv(path, history):
    if not history:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0]))
        writer.writeheader()
        writer.writerows(history)


def train_pipeline(
    pipeline,
    samples,
    steps,
    lr=1e-3,
    seed=0,
    batch_size=2,
    extractor=None,
    log_path=None,
    checkpoint_cb=None,
    opt=None,
):
    """Jointly train all three stages; returns the loss history."""
    prep = [prepare_sample(s, pipeline.geom, pipeline.mode) for s in samples]
    fe = extractor if extractor is not None else FeatureExtractor(seed=0)
    opt = opt if opt is not None else Adam(pipeline.params(), lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    for step, idxs in enumerate(_batches(len(prep), batch_size, steps, rng)):
        batch = prepare_batch(prep, idxs)
        outs = pipeline.forward(batch, training=True)
        loss, parts = total_loss(outs, Tensor(batch["s_gt"]), Tensor(batch["x_gt"]), fe)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": step, "total": float(loss.data), **parts})
        if checkpoint_cb is not None:
            checkpoint_cb(step, pipeline, history)
    if log_path:
        write_history_csv(log_path, history)
    return history


def train_sino_stage(net, mode, samples, geom, steps, lr=1e-3, seed=0, batch_size=2,
                     log_path=None, opt=None):
    """Train only a sinogram restoration net with the stage-one loss."""
    prep = [prepare_sample(s, geom, mode) for s in samples]
    opt = opt if opt is not None else Adam(net.params(), lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    for step, idxs in enumerate(_batches(len(prep), batch_size, steps, rng)):
        batch = prepare_batch(prep, idxs)
        s_r = net(Tensor(batch["sino_in"]), training=True)
        x_s, _ = replace_and_recon(s_r, batch["s_mc"], batch["trace"], geom)
        loss = restoration_loss(s_r, Tensor(batch["s_gt"]), x_s, Tensor(batch["x_gt"]))
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": step, "total": float(loss.data)})
    if log_path:
        write_history_csv(log_path, history)
    return history


def infer_pipeline(pipeline, samples):
    """Eval-mode forward over single-sample batches; numpy outputs."""
    out = []
    for s in samples:
        prep = prepare_sample(s, pipeline.geom, pipeline.mode)
        batch = prepare_batch([prep], [0])
        with no_grad():
            o = pipeline.forward(batch, training=False)
        out.append({k: np.asarray(v.data[0, 0]) for k, v in o.items()})
    return out
