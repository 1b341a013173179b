import logging
import os

from dotenv import load_dotenv

load_dotenv()

__version__ = "0.1.0"

logging.basicConfig(
    level=getattr(logging, os.getenv("COUPLEDCAST_LOG_LEVEL", "INFO").upper(), logging.INFO),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)
