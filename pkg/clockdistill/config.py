"""
Environment-driven settings shared by the CLI, the HTTP app and the harness
"""

import os

from dotenv import load_dotenv

load_dotenv()

BASE_DIR: str = os.path.dirname(os.path.abspath(__file__))
LOG_DIR: str = os.getenv("CLOCKDISTILL_LOG_DIR", os.path.join(BASE_DIR, "logs"))
DEVICE: str = os.getenv("CLOCKDISTILL_DEVICE", "cpu")
NUM_WORKERS: int = int(os.getenv("CLOCKDISTILL_NUM_WORKERS", "0"))
# checkpoint served by clockdistill.main, empty means "not loaded"
SERVED_CHECKPOINT: str | None = os.getenv("CLOCKDISTILL_CHECKPOINT") or None
