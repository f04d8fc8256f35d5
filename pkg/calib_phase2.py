import os
import sys
import time

import numpy as np

from xlingcap.config import ModelConfig, Phase1Config, Phase2Config, WorldConfig
from xlingcap.metrics import cider, bleu
from xlingcap.synthworld import (generate_image_graphs, generate_parallel_corpus,
                                 generate_world, materialize_distortion)
from xlingcap.training import (infer_caption, load_phase1_model,
                               save_phase1_checkpoint, train_phase1,
                               train_phase2)

SEED = int(sys.argv[1]) if len(sys.argv) > 1 else 1
P2_EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 30
P2_LR = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-3
N_EVAL = 150

world = generate_world(WorldConfig(seed=SEED, homonym_scene_rate=0.6))
train = generate_parallel_corpus(world, 2000, salt=1)
bank_train = generate_image_graphs(world, 1000, salt=1)
bank_test = generate_image_graphs(world, N_EVAL, salt=5)

MC = ModelConfig(d_emb=48, d_att=32, d_word=32, lstm_hidden=48, gate_hidden=32,
                 variant="gated")
ckpt_dir = f"/tmp/calib_p1_seed{SEED}"

t0 = time.time()
if os.path.exists(ckpt_dir):
    model, _ = load_phase1_model(ckpt_dir)
    print(f"loaded phase1 from {ckpt_dir}", flush=True)
else:
    p1 = Phase1Config(d_c=16, epochs_xe=60, epochs_joint=0, lr=5e-3, batch=100)
    res = train_phase1(world, train, MC, p1, seed=SEED)
    model = res.model
    save_phase1_checkpoint(ckpt_dir, model, world, p1, SEED)
    print(f"phase1 trained in {time.time()-t0:.0f}s xe={res.final_xe_per_token:.3f}",
          flush=True)

dist = materialize_distortion(world.config.distortion, MC.d_emb, world.seed)


def eval_captions(cmm, use_cmm, beam=3):
    cands = [infer_caption(model, g, cmm, dist, beam=beam, use_cmm=use_cmm)
             for g in bank_test.graphs]
    refs = bank_test.references
    return cider(cands, refs), bleu(cands, refs, 1)


t1 = time.time()
c_no, b_no = eval_captions(None, False)
print(f"no-CMM: cider={c_no:.3f} bleu1={100*b_no:.2f} ({time.time()-t1:.0f}s)",
      flush=True)

# clean reference point: decode the same graphs without any distortion
t1 = time.time()
cands_clean = [model.caption(g, beam=3) for g in bank_test.graphs]
c_clean = cider(cands_clean, bank_test.references)
print(f"clean (no distortion): cider={c_clean:.3f} ({time.time()-t1:.0f}s)",
      flush=True)

p2 = Phase2Config(lam=10.0, disc_hidden=64, mapper_hidden=64,
                  epochs=P2_EPOCHS, lr=P2_LR, batch=64)
t1 = time.time()
res2 = train_phase2(world, bank_train, train, model, p2, seed=SEED)
print(f"phase2 {P2_EPOCHS} epochs lr={P2_LR} in {time.time()-t1:.0f}s "
      f"cycle/dim={res2.final_cycle_per_dim:.4f}", flush=True)
for rec in res2.history[:: max(1, P2_EPOCHS // 5)]:
    print("  ", rec, flush=True)

t1 = time.time()
c_cmm, b_cmm = eval_captions(res2.cmm, True)
rel = (c_cmm - c_no) / max(1e-9, c_no)
print(f"CMM: cider={c_cmm:.3f} bleu1={100*b_cmm:.2f} rel_gain={100*rel:.1f}% "
      f"({time.time()-t1:.0f}s)", flush=True)
