"""
Shared base for the pipeline subcommands.
"""

import logging

from django.core.management.base import BaseCommand, CommandError

from core.exceptions import PipelineException

from ..config import RunConfig


logger = logging.getLogger(__name__)


class PipelineCommand(BaseCommand):
    """
    Adds the run-level flags, loads the RunConfig and maps pipeline errors
    to exit codes (1 config, 2 missing input, 3 numerical failure).
    """

    stage = None

    def add_arguments(self, parser):
        parser.add_argument('--config', help='Run config JSON file')
        parser.add_argument('--seed', type=int, help='Run seed')
        parser.add_argument('--out', help='Run directory')
        parser.add_argument('--threads', type=int, help='Worker threads')
        parser.add_argument('--baseline-slic', action='store_true', default=None,
                            help='Use SLIC superpixels and the SLIC contrastive term')
        parser.add_argument('--misalign', nargs=2, type=float, metavar=('T_FRAC', 'R_FRAC'),
                            help='Perturb camera extrinsics by these translation/rotation fractions')
        parser.add_argument('--timing', action='store_true', default=None,
                            help='Record wall-clock timings in outputs')

    def load_config(self, options):
        return RunConfig.load(
            options.get('config'),
            seed=options.get('seed'),
            out=options.get('out'),
            threads=options.get('threads'),
            baseline_slic=options.get('baseline_slic'),
            misalign=options.get('misalign'),
            timing=options.get('timing'),
        )

    def handle(self, *args, **options):
        try:
            config = self.load_config(options)
            record = self.stage(config)
        except PipelineException as exc:
            logger.error('%s failed [%s]: %s', self.stage_name, exc.code, exc.message)
            raise CommandError(f'[{exc.code}] {exc.message}', returncode=exc.exit_code) from exc
        self.stdout.write(self.style.SUCCESS(f'{self.stage_name}: done ({record.get("path", config.out)})'))

    @property
    def stage_name(self):
        return self.__module__.rsplit('.', 1)[-1]
