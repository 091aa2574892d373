"""Train a small model on synthetic data and look at the metrics report."""

import json

from almt.data import SynthConfig, generate_synthetic, split_dataset
from almt.model import ALMTModel, ModelConfig, count_parameters
from almt.train import TrainConfig, train

dims = {"language": 32, "visual": 8, "audio": 4}
lens = {"language": 10, "visual": 10, "audio": 10}

# language always carries the label; 70% of visual/audio frames do, the rest are N(0, 1)
data = generate_synthetic(SynthConfig(n_samples=240, lengths=lens, dims=dims, relevance=0.7,
                                      noise_sigma=1.0, seed=0))
train_set, valid_set, test_set = split_dataset(data, (0.7, 0.15, 0.15), seed=0)
print("splits:", len(train_set), len(valid_set), len(test_set))

cfg = ModelConfig(token_len=8, model_dim=32, heads=4, d_k=8, fusion_depth=1, input_dims=dims, input_lens=lens)
print("parameters:", count_parameters(ALMTModel(cfg)))

result = train(TrainConfig(cfg, train_set, valid_set, test_set, epochs=30, batch_size=32, base_lr=1e-3))
for entry in result.log[::5]:
    print(f"epoch {entry['epoch']:3d}  lr {entry['lr']:.2e}  train {entry['train_loss']:.4f}  "
          f"valid {entry['valid_loss']:.4f}")
print("best epoch:", result.best_epoch)

report = result.test.report.to_dict()
report.pop("bucket_counts")
print(json.dumps(report, indent=2))
