import logging
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from cli_io.config import RunConfig

logger = logging.getLogger(__name__)

VALIDATION_EXIT = 1
NUMERIC_EXIT = 2


class GFDNCommand(BaseCommand):
    """
    Base for the toolkit commands. Subclasses implement ``run``; invalid
    input leaves with exit code 1, numeric failures with exit code 2.
    """

    uses_config = True

    def add_arguments(self, parser):
        if self.uses_config:
            parser.add_argument('--config', help='JSON or TOML run file merged over the GFDN settings')
            parser.add_argument('--seed', type=int, help='Override the configured random seed')
        parser.add_argument('--threads', type=int, help='Worker threads (default: GFDN_NUM_THREADS)')

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except ValidationError as exc:
            logger.error(f"{self.command_name()} rejected its input", exc_info=True)
            raise CommandError('; '.join(exc.messages), returncode=VALIDATION_EXIT)
        except (ArithmeticError, np.linalg.LinAlgError) as exc:
            logger.error(f"{self.command_name()} failed numerically", exc_info=True)
            raise CommandError(f'{type(exc).__name__}: {exc}', returncode=NUMERIC_EXIT)

    def run(self, **options):
        raise NotImplementedError

    def command_name(self):
        return self.__module__.rsplit('.', 1)[-1]

    def load_config(self, options, **overrides):
        return RunConfig.load(options.get('config'), seed=options.get('seed'), **overrides)

    @staticmethod
    def workers(options):
        threads = options.get('threads') or settings.GFDN_NUM_THREADS
        if threads < 1:
            raise ValidationError(f'Thread count must be positive, got {threads}')
        return threads

    @staticmethod
    def output_dir(options, name):
        return Path(options.get('output') or settings.GFDN_OUTPUT_DIR / name)
