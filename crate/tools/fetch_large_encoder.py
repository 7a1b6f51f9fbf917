"""Fetch the pretrained large encoder and store it as safetensors.

Writes wavlm_large.safetensors (reference parameter names) into the target
directory, which is normally $PASE_ASSET_DIR.

Usage: python3 tools/fetch_large_encoder.py /path/to/assets [model-id]
"""

import sys
from pathlib import Path

from safetensors.torch import save_file
from transformers import WavLMModel


def main(out_dir: Path, model_id: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    model = WavLMModel.from_pretrained(model_id).eval()
    state = {k: v.detach().contiguous() for k, v in model.state_dict().items()}
    target = out_dir / "wavlm_large.safetensors"
    save_file(state, str(target))
    print(f"wrote {target} ({len(state)} tensors)")


if __name__ == "__main__":
    if len(sys.argv) < 2:
        sys.exit(__doc__)
    main(Path(sys.argv[1]), sys.argv[2] if len(sys.argv) > 2 else "microsoft/wavlm-large")
