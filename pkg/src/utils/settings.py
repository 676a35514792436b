import logging
from logging import getLogger

# Load the variables from a .env file
from dotenv import load_dotenv
import os

load_dotenv()

# Application settings
ED_LOG_LEVEL = os.getenv("ED_LOG_LEVEL", "INFO").upper()
ED_DEFAULT_FORMAT = os.getenv("ED_DEFAULT_FORMAT", "mxint4")
ED_EXECUTION_MODE = os.getenv("ED_EXECUTION_MODE", "low_memory").lower()
ED_BYTES_PER_VALUE = int(os.getenv("ED_BYTES_PER_VALUE", "4"))
ED_DEFAULT_SEED = int(os.getenv("ED_DEFAULT_SEED", "0"))

# Configure logger for the application
logger = getLogger("error_diffusion")
logger.setLevel(ED_LOG_LEVEL)
handler = logging.StreamHandler()
formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
handler.setFormatter(formatter)
logger.addHandler(handler)

def get_logger():
    return logger
