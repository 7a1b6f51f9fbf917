"""Export a tiny randomly initialised reference WavLM and its hidden states.

Writes two safetensors files into the output directory:
  reference_encoder.safetensors  parameters under the reference names
  reference_golden.safetensors   input waveform, mask and hidden states

Usage: python3 tools/export_reference_encoder.py crates/core/tests/assets
"""

import json
import sys
from pathlib import Path

import torch
from safetensors.torch import save_file
from transformers import WavLMConfig, WavLMModel


def main(out_dir: Path) -> None:
    torch.manual_seed(1234)
    cfg = WavLMConfig(
        hidden_size=32,
        num_hidden_layers=2,
        num_attention_heads=4,
        intermediate_size=64,
        conv_dim=(16, 16, 16),
        conv_kernel=(8, 4, 4),
        conv_stride=(4, 4, 4),
        conv_bias=False,
        feat_extract_norm="layer",
        do_stable_layer_norm=True,
        num_conv_pos_embeddings=16,
        num_conv_pos_embedding_groups=4,
        num_buckets=320,
        max_bucket_distance=800,
        hidden_act="gelu",
        layer_norm_eps=1e-5,
        hidden_dropout=0.0,
        attention_dropout=0.0,
        activation_dropout=0.0,
        feat_proj_dropout=0.0,
        layerdrop=0.0,
        apply_spec_augment=True,
    )
    model = WavLMModel(cfg).eval()
    # Default init is tiny; spread the weights so the comparison is sensitive.
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "layer_norm" in name and name.endswith("weight"):
                p.copy_(1.0 + 0.2 * torch.randn_like(p))
            elif "gru_rel_pos_const" in name:
                p.copy_(1.0 + 0.5 * torch.rand_like(p))
            else:
                p.copy_(0.2 * torch.randn_like(p))

    length = 16000
    t = torch.arange(length, dtype=torch.float32) / 16000.0
    wav = 0.3 * torch.sin(2 * torch.pi * 220.0 * t) + 0.05 * torch.randn(length)
    wav = wav.unsqueeze(0)

    with torch.no_grad():
        plain = model(wav, output_hidden_states=True)
        frames = plain.last_hidden_state.shape[1]
        mask = torch.zeros(1, frames, dtype=torch.bool)
        mask[0, 5:15] = True
        mask[0, 40:47] = True
        masked = model(wav, mask_time_indices=mask, output_hidden_states=True)

    state = {k: v.detach().contiguous() for k, v in model.state_dict().items()}
    save_file(state, str(out_dir / "reference_encoder.safetensors"))

    golden = {"input": wav.contiguous(), "mask": mask.to(torch.float32)}
    for i, h in enumerate(plain.hidden_states):
        golden[f"hidden.{i}"] = h[0].contiguous()
    for i, h in enumerate(masked.hidden_states):
        golden[f"masked_hidden.{i}"] = h[0].contiguous()
    encoder_cfg = {
        "n_layers": 2,
        "model_dim": 32,
        "n_heads": 4,
        "ffn_dim": 64,
        "cnn_channels": [16, 16, 16],
        "cnn_kernels": [8, 4, 4],
        "cnn_strides": [4, 4, 4],
        "cnn_bias": False,
        "pos_conv_kernel": 16,
        "pos_conv_groups": 4,
        "num_buckets": 320,
        "max_distance": 800,
        "frame_rate_hz": 250.0,
        "pad_input": False,
        "layer_norm_eps": 1e-5,
    }
    save_file(golden, str(out_dir / "reference_golden.safetensors"), metadata={"encoder_config": json.dumps(encoder_cfg)})
    print(f"frames={frames} params={sum(p.numel() for p in model.parameters())}")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "."))
