"""Controlled benchmark matrix at the candidate acceptance schedule."""
import sys
import time

from xlingcap.config import ModelConfig, Phase1Config, WorldConfig
from xlingcap.metrics import bleu
from xlingcap.synthworld import generate_parallel_corpus, generate_world
from xlingcap.training import train_phase1

SEED = int(sys.argv[1])
TOTAL = int(sys.argv[2]) if len(sys.argv) > 2 else 60
JOINT = int(sys.argv[3]) if len(sys.argv) > 3 else 12

world = generate_world(WorldConfig(seed=SEED, homonym_scene_rate=0.6))
train = generate_parallel_corpus(world, 2000, salt=1)
val = generate_parallel_corpus(world, 200, salt=2)


def run(variant, use_kl):
    t0 = time.time()
    mc = ModelConfig(d_emb=48, d_att=32, d_word=32, lstm_hidden=48,
                     gate_hidden=32, variant=variant)
    if use_kl:
        cfg = Phase1Config(d_c=100, epochs_xe=TOTAL - JOINT,
                           epochs_joint=JOINT, lr=5e-3, batch=100, use_kl=True)
    else:
        cfg = Phase1Config(d_c=100, epochs_xe=TOTAL, epochs_joint=0,
                           lr=5e-3, batch=100, use_kl=False)
    res = train_phase1(world, train, mc, cfg, seed=SEED)
    cands = [res.model.caption(it.graph, beam=1) for it in val.items]
    b1 = 100 * bleu(cands, [[it.target] for it in val.items], 1)
    tag = "joint" if use_kl else "xeonly"
    print(f"seed{SEED} {variant:9s} {tag:6s} ep{TOTAL}: bleu1={b1:.2f} "
          f"xe={res.final_xe_per_token:.3f} kl={res.final_kl:.4f} "
          f"t={time.time()-t0:.0f}s", flush=True)


run("gated", True)
run("word_sub", True)
run("word", True)
run("gated", False)
run("word", False)
