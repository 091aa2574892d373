"""Where does the language-guided attention look, and what happens when a frame gets noisy?"""

import numpy as np

from almt.analysis import average_attention, peak_frame_probe
from almt.data import SynthConfig, generate_synthetic
from almt.model import ModelConfig
from almt.train import TrainConfig, train

dims = {"language": 32, "visual": 8, "audio": 4}
lens = {"language": 10, "visual": 10, "audio": 10}
np.set_printoptions(precision=3, suppress=True)

data = generate_synthetic(SynthConfig(n_samples=160, lengths=lens, dims=dims, relevance=0.8,
                                      noise_sigma=1.0, seed=0))
train_set, valid_set = data.subset(range(128)), data.subset(range(128, 160))
cfg = ModelConfig(token_len=8, model_dim=32, heads=4, d_k=8, fusion_depth=1, input_dims=dims, input_lens=lens)
model = train(TrainConfig(cfg, train_set, valid_set, epochs=40, batch_size=32, base_lr=1e-3)).model

# dataset-averaged maps: rows are hyper-modality queries, columns embedded frames
alphas, betas = average_attention(model, valid_set)
for j, b in enumerate(betas, start=1):
    print(f"layer {j} beta, row sums {b.sum(axis=1).round(6)}")
    print(b)

# perturb the embedded visual row with the most attention in the last layer
for seed in range(3):
    probe = peak_frame_probe(model, valid_set[seed], "visual", amplitude=5.0, seed=seed)
    print(f"sample {seed}: column {probe.column}  clean {probe.clean_mass:.4f}  "
          f"noised {probe.noised_mass:.4f}  suppressed={probe.suppressed}")
