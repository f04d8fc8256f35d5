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

world = generate_world(WorldConfig(seed=1, homonym_scene_rate=0.6))
train = generate_parallel_corpus(world, 2000, salt=1)
val = generate_parallel_corpus(world, 200, salt=2)


def hom_accuracy(model, items):
    hit = tot = 0
    for it in items:
        homs = [n for n in it.graph.objects if n.token in world.rules.contexts]
        if not homs:
            continue
        cand = model.caption(it.graph, beam=1)
        for n in homs:
            truth = world.rules.translate_object(n.token, it.graph, n.id)
            tot += 1
            if truth in cand:
                hit += 1
    return hit / max(1, tot)


def run(variant, seed, epochs, lr, eval_every=20):
    mc = ModelConfig(d_emb=48, d_att=32, d_word=32, lstm_hidden=48,
                     gate_hidden=32, variant=variant)
    model = Phase1Model(world.space, world.source_vocab, world.target_vocab,
                        mc, 16, seed)
    params = model.as_dict()
    opt = AdamState(params, lr=lr)
    rng = np.random.default_rng([seed, 5000])
    t0 = time.time()
    for ep in range(epochs):
        perm = rng.permutation(len(train.items))
        for s in range(0, len(perm), 100):
            batch = [train.items[i] for i in perm[s:s + 100]]
            model.zero_grad()
            nm.reset_tape()
            out = batch_losses(model, batch, use_kl=False)
            nm.backward(out.loss)
            adam_step(params, {k: t.grad for k, t in params.items()}, opt)
        if (ep + 1) % eval_every == 0:
            cands = [model.caption(it.graph, beam=1) for it in val.items]
            b1 = bleu(cands, [[it.target] for it in val.items], 1)
            ha = hom_accuracy(model, val.items)
            print(f"  {variant} s{seed} ep{ep+1}: bleu1={100*b1:.2f} "
                  f"hom={100*ha:.1f}% xe={out.xe.item()/out.n_tokens:.3f} "
                  f"t={time.time()-t0:.0f}s", flush=True)


if __name__ == "__main__":
    epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 60
    lr = float(sys.argv[2]) if len(sys.argv) > 2 else 5e-3
    for variant in ("word", "word_sub", "gated"):
        run(variant, 1, epochs, lr)
