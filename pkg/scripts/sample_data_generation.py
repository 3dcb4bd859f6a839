"""
    This is the Sample panel data generation file, for testing purposes.
    It writes a small synthetic judge panel (manifest, scores, human
    judgments and the panel config) to data/sample.
"""

import os

import orjson

from app.logger import logger
from app.records import save_manifest, save_records
from app.schemas import Setting, SimConfig
from app.simulator import make_panel_config, sim_manifest, simulate_judgments, simulate_scores

OUT_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "data", "sample")

MODEL_IDS = [
    "gemma3-4b",
    "internvl2.5-8b",
    "llava-ov-7b",
    "molmo-7b-d",
    "phi3.5-vision",
    "qwen2.5-vl-7b",
]


def generate_sample_panel(out_dir: str = OUT_DIR) -> SimConfig:
    """Write both settings of a six-model sample panel to out_dir.

    Args:
        out_dir (str, optional): output directory. Defaults to data/sample.

    Returns:
        SimConfig: the panel that was written
    """
    logger.info("Generating sample panel data...")
    config = make_panel_config(
        M=len(MODEL_IDS),
        N=200,
        self_bias=[0.04, 0.15, 0.02, 0.10, 0.06, 0.12],
        cross_bias_spread=0.05,
        noise_std=0.03,
        item_quality_std=0.05,
        seed=7,
    ).model_copy(update={"model_ids": MODEL_IDS})

    os.makedirs(out_dir, exist_ok=True)
    for offset, setting in enumerate((Setting.REFERENCE_BASED, Setting.REFERENCE_FREE)):
        suffix = setting.value.replace("-", "_")
        # each setting gets its own draws
        panel = config.model_copy(update={"seed": config.seed + offset})
        save_manifest(os.path.join(out_dir, f"manifest_{suffix}.json"), sim_manifest(panel, setting))
        save_records(os.path.join(out_dir, f"scores_{suffix}.jsonl"), simulate_scores(panel, setting))

    save_records(os.path.join(out_dir, "judgments.jsonl"), simulate_judgments(config, human_noise_std=0.05, seed=7))
    with open(os.path.join(out_dir, "sim.json"), "wb") as sim_file:
        sim_file.write(orjson.dumps(config.model_dump(mode="json"), option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2))

    logger.info(f"Sample panel written to {out_dir}")
    return config


if __name__ == "__main__":
    try:
        generate_sample_panel()
    except OSError as e:
        logger.error(f"Error writing sample data: {e}")
        raise e
