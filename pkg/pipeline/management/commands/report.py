from pipeline.management.base import PipelineCommand
from pipeline.services import run_report


class Command(PipelineCommand):
    help = 'Summarize metrics, probe reports and robustness results.'
    stage = staticmethod(run_report)
