import sys
import time

import numpy as np

from xlingcap import numerics as nm
from xlingcap.config import ModelConfig, WorldConfig
from xlingcap.metrics import bleu
from xlingcap.model import Phase1Model
from xlingcap.numerics import AdamState, Tensor, adam_step
from xlingcap.params import Affine
from xlingcap.synthworld import generate_parallel_corpus, generate_world
from xlingcap.training import kl_loss

SEED = int(sys.argv[1]) if len(sys.argv) > 1 else 1
MODE = sys.argv[2] if len(sys.argv) > 2 else "detach"   # detach|both|sum|none
D_C = int(sys.argv[3]) if len(sys.argv) > 3 else 16

world = generate_world(WorldConfig(seed=SEED, homonym_scene_rate=0.6))
train = generate_parallel_corpus(world, 2000, salt=1)
val = generate_parallel_corpus(world, 200, salt=2)


def run(variant):
    mc = ModelConfig(d_emb=48, d_att=32, d_word=32, lstm_hidden=48,
                     gate_hidden=32, variant=variant)
    model = Phase1Model(world.space, world.source_vocab, world.target_vocab,
                        mc, D_C, SEED)
    params = model.as_dict()
    opt = AdamState(params, lr=5e-3)
    rng = np.random.default_rng([SEED, 5000])
    t0 = time.time()
    for ep in range(40):
        use_kl = MODE != "none" and ep >= 32
        perm = rng.permutation(len(train.items))
        for s in range(0, len(perm), 100):
            batch = [train.items[i] for i in perm[s:s + 100]]
            model.zero_grad()
            nm.reset_tape()
            graphs = [it.graph for it in batch]
            enc_x = model.branch_encoded(graphs, "x")
            enc_y = model.branch_encoded(graphs, "y")
            xe_x, _ = model.teacher_forced_nll(enc_x,
                                               [it.source for it in batch], "x")
            xe_y, _ = model.teacher_forced_nll(enc_y,
                                               [it.target for it in batch], "y")
            if MODE == "sum":
                loss = xe_x + xe_y
            else:
                loss = (xe_x + xe_y) * (1.0 / len(batch))
            if use_kl:
                px = model.pooled_features(enc_x)
                if MODE == "detach":
                    px = {k: ((v[0].detach(), v[1]) if v else None)
                          for k, v in px.items()}
                py = model.pooled_features(enc_y)
                loss = loss + kl_loss(px, py, model.kl_proj)
            nm.backward(loss)
            adam_step(params, {k: t.grad for k, t in params.items()}, opt)
    cands = [model.caption(it.graph, beam=1) for it in val.items]
    b1 = 100 * bleu(cands, [[it.target] for it in val.items], 1)
    print(f"seed{SEED} {variant} mode={MODE} d_c={D_C}: bleu1={b1:.2f} "
          f"t={time.time()-t0:.0f}s", flush=True)


run("word")
run("gated")
