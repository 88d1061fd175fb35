import logging
import os
from functools import wraps

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - [%(filename)s:%(lineno)d] - %(message)s'

logger = logging.getLogger(__name__)


def configure_logging(level=None):
    """Configure root logging once for the CLI and the test harness."""
    level = level or os.getenv("ALIGN_LAB_LOG_LEVEL", "INFO")
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), format=LOG_FORMAT)


def _summarize(result):
    summary = {}
    if isinstance(result, dict):
        for key in ("status", "count", "converged", "accuracy", "success_rate", "message"):
            if key in result:
                summary[key] = result[key]
    return summary


# Stage tracking decorator
def track_stage(stage_name):
    """Decorator to track pipeline stages with banner logging"""
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            logger.info(f"{'='*80}")
            logger.info(f"🔧 STAGE: {stage_name}")
            logger.info(f"   Function: {func.__name__}")

            params = {}
            if args:
                params['args'] = str(args)[:200]
            if kwargs:
                params['kwargs'] = {k: str(v)[:100] for k, v in kwargs.items()}
            if params:
                logger.info(f"   Parameters: {params}")
            logger.info(f"{'='*80}")

            try:
                result = func(*args, **kwargs)

                failed = isinstance(result, dict) and result.get("status") == "error"
                log = logger.error if failed else logger.info
                log(f"{'='*80}")
                log(f"❌ STAGE FAILED: {stage_name}" if failed else f"✅ STAGE DONE: {stage_name}")
                for key, value in _summarize(result).items():
                    log(f"   {key.capitalize()}: {value}")
                log(f"{'='*80}")

                return result
            except Exception as e:
                logger.error(f"{'='*80}")
                logger.error(f"❌ STAGE ERROR: {stage_name}")
                logger.error(f"   Error: {str(e)}")
                logger.error(f"{'='*80}")
                raise
        return wrapper
    return decorator
