import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

_HANDLER_TAG = "_arsivae_handler"


def setup_logging(log_dir: Optional[Path] = None, verbose: bool = False) -> None:
    """Configure console + file logging from the packaged logging_config.yaml."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, _HANDLER_TAG, False):
            root.removeHandler(handler)
            handler.close()

    try:
        text = resources.files("arsivae").joinpath("config/logging_config.yaml").read_text(encoding="utf-8")
        log_config = yaml.safe_load(text)

        fmt_cfg = log_config["formatters"]["detailed"]
        formatter = logging.Formatter(fmt_cfg["format"], datefmt=fmt_cfg.get("datefmt"))
        handlers_cfg = log_config["logging"]["handlers"]

        console = logging.StreamHandler(sys.stderr)
        console.setLevel(logging.DEBUG if verbose else handlers_cfg["console"]["level"])
        console.setFormatter(formatter)
        handlers = [console]

        if log_dir is not None:
            file_cfg = handlers_cfg["file"]
            Path(log_dir).mkdir(parents=True, exist_ok=True)
            file_handler = logging.FileHandler(
                Path(log_dir) / file_cfg["filename"], mode=file_cfg.get("mode", "a"), encoding="utf-8"
            )
            file_handler.setLevel(file_cfg["level"])
            file_handler.setFormatter(formatter)
            handlers.append(file_handler)

        root.setLevel(log_config["logging"]["level"])
        for handler in handlers:
            setattr(handler, _HANDLER_TAG, True)
            root.addHandler(handler)

        # Reduce noise from verbose libraries
        for noisy_logger in log_config.get("quiet", []):
            logging.getLogger(noisy_logger).setLevel(logging.WARNING)

    except Exception as e:
        print(f"⚠️ Warning: Could not load logging config: {e}", file=sys.stderr)
        logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")
