"""d_emb=32 trio on one seed."""
import sys
import time

from xlingcap.config import ModelConfig, Phase1Config, WorldConfig
from xlingcap.metrics import bleu
from xlingcap.synthworld import generate_parallel_corpus, generate_world
from xlingcap.training import train_phase1

SEED = int(sys.argv[1])
EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 48

world = generate_world(WorldConfig(seed=SEED, homonym_scene_rate=0.6))
train = generate_parallel_corpus(world, 2000, salt=1)
val = generate_parallel_corpus(world, 200, salt=2)

for variant in ("gated", "word_sub", "word"):
    t0 = time.time()
    mc = ModelConfig(d_emb=32, d_att=32, d_word=32, lstm_hidden=48,
                     gate_hidden=32, variant=variant)
    cfg = Phase1Config(d_c=100, epochs_xe=EPOCHS - 8, epochs_joint=8,
                       lr=5e-3, batch=100, use_kl=True)
    res = train_phase1(world, train, mc, cfg, seed=SEED)
    cands = [res.model.caption(it.graph, beam=1) for it in val.items]
    b1 = 100 * bleu(cands, [[it.target] for it in val.items], 1)
    print(f"seed{SEED} {variant} d32 ep{EPOCHS}: bleu1={b1:.2f} "
          f"xe={res.final_xe_per_token:.3f} t={time.time()-t0:.0f}s", flush=True)
