from pipeline.management.base import PipelineCommand
from pipeline.services import run_pretrain


class Command(PipelineCommand):
    help = 'Pretrain the point encoder against the frozen image encoder.'
    stage = staticmethod(run_pretrain)
