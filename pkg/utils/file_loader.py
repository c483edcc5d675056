"""File loading utilities for configs, prompt banks and JSON artifacts."""
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from utils.logger import setup_logger

logger = setup_logger(__name__)

DATA_DIR = Path(__file__).parent.parent / "data"


def resolve_data_path(file_path: str, subdir: Optional[str] = None) -> str:
    """
    Resolve a file path, checking multiple locations.
    
    Order: as given (absolute or relative to the working directory), then
    ``data/<subdir>/``, then ``data/``.
    
    Args:
        file_path: File name or path
        subdir: Optional sub-directory of data/ to search (e.g. "configs")
        
    Returns:
        The first existing candidate, or the path as given if none exists
    """
    if os.path.isabs(file_path) or Path(file_path).exists():
        return str(file_path)
    
    candidates = []
    if subdir:
        candidates.append(DATA_DIR / subdir / file_path)
    candidates.append(DATA_DIR / file_path)
    for candidate in candidates:
        if candidate.exists():
            logger.debug(f"Resolved {file_path} -> {candidate}")
            return str(candidate)
    return str(file_path)


def load_structured_file(file_path: str) -> Any:
    """
    Load a YAML or JSON file (JSON is parsed by the YAML loader as a subset).
    
    Raises:
        FileNotFoundError: If the file doesn't exist
        yaml.YAMLError: If the file is malformed
    """
    path = Path(file_path)
    if not path.exists():
        logger.error(f"File not found: {file_path}")
        raise FileNotFoundError(f"File not found: {file_path}")
    
    logger.debug(f"Loading structured file from: {file_path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            if path.suffix == ".json":
                return json.load(f)
            return yaml.safe_load(f)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        logger.error(f"Invalid structured data in file {file_path}: {e}")
        raise


def write_json(file_path: Union[str, Path], data: Any) -> Path:
    """Write stable (sorted, indented) JSON, creating parent directories."""
    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.debug(f"Wrote JSON: {path}")
    return path


def list_available_configs() -> List[str]:
    """
    List all shipped run configurations in data/configs/.
    
    Returns:
        Sorted list of config file names
    """
    configs_dir = DATA_DIR / "configs"
    if not configs_dir.exists():
        logger.warning(f"Configs directory not found: {configs_dir}")
        return []
    
    return sorted(
        f.name for f in configs_dir.iterdir()
        if f.is_file() and f.suffix in (".yaml", ".yml", ".json")
    )
