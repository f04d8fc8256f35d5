"""Validation-BLEU trajectory over long XE-only training."""
import sys
import time

import numpy as np

from xlingcap import numerics as nm
from xlingcap.config import ModelConfig, WorldConfig
from xlingcap.metrics import bleu
from xlingcap.model import Phase1Model
from xlingcap.numerics import AdamState, adam_step
from xlingcap.synthworld import generate_parallel_corpus, generate_world
from xlingcap.training import batch_losses

SEED = int(sys.argv[1])
VARIANT = sys.argv[2]
EPOCHS = int(sys.argv[3]) if len(sys.argv) > 3 else 100

world = generate_world(WorldConfig(seed=SEED, homonym_scene_rate=0.6))
train = generate_parallel_corpus(world, 2000, salt=1)
val = generate_parallel_corpus(world, 200, salt=2)

mc = ModelConfig(d_emb=48, d_att=32, d_word=32, lstm_hidden=48,
                 gate_hidden=32, variant=VARIANT)
model = Phase1Model(world.space, world.source_vocab, world.target_vocab,
                    mc, 100, SEED)
params = model.as_dict()
opt = AdamState(params, lr=5e-3)
rng = np.random.default_rng([SEED, 5000])
t0 = time.time()
for ep in range(EPOCHS):
    perm = rng.permutation(len(train.items))
    for s in range(0, len(perm), 100):
        batch = [train.items[i] for i in perm[s:s + 100]]
        model.zero_grad()
        nm.reset_tape()
        out = batch_losses(model, batch, use_kl=False)
        nm.backward(out.loss)
        adam_step(params, {k: t.grad for k, t in params.items()}, opt)
    if (ep + 1) % 10 == 0:
        cands = [model.caption(it.graph, beam=1) for it in val.items]
        b1 = 100 * bleu(cands, [[it.target] for it in val.items], 1)
        print(f"seed{SEED} {VARIANT} ep{ep+1}: val_bleu1={b1:.2f} "
              f"train_xe={out.xe.item()/out.n_tokens:.3f} "
              f"t={time.time()-t0:.0f}s", flush=True)
