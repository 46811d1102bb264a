from flask import current_app
from echub import blueprints
from echub.config import load_settings, output_dir
from echub.corpus import TrialCorpus
from echub.errors import ConfigError, SuiteError
from echub.experiments import ablate, run_suite
from echub.gradcheck import CASES, gradcheck
from echub.preprocessing import preprocess_recording
from echub.rundb import RunTable
from echub.splits import split_cv, split_loso
from echub.synthetic import generate, generate_recordings
from echub.training import RunManifest, train
from echub.version import __version__
from robot.utils.argumentparser import ArgFileParser
from tornado.httpserver import HTTPServer
from tornado.wsgi import WSGIContainer
import tornado.ioloop
import argparse
import flask
import json
import logging
import numpy as np
import os
import signal
import sys

log = logging.getLogger(__name__)


def create_app(rundb):
    """Flask app serving the run index read-only under /api"""
    app = flask.Flask(__name__)

    with app.app_context():
        current_app.rundb = rundb

    app.add_url_rule("/ping", "ping", _ping)
    app.register_blueprint(blueprints.api, url_prefix="/api")
    return app


def _ping():
    """This function is called via the /ping url"""
    return "pong"


class ExperimentHub(object):
    """Experiment hub - command line for corpora, runs, suites and results"""

    def __init__(self, argv=None):
        self.args = self._parse_args(argv)

    def run(self):
        """Run the chosen subcommand; returns the exit status"""
        if self.args.version:
            print(__version__)
            return 0
        if not getattr(self.args, "command", None):
            self.parser.print_usage(sys.stderr)
            return 2
        return getattr(self, "cmd_" + self.args.command)() or 0

    # ------------------------------------------------------------------
    # subcommands
    # ------------------------------------------------------------------

    def cmd_generate(self):
        settings = self._settings()
        spec = settings.generator
        target = self.args.corpus or os.path.join(output_dir(self.args.output_dir), "corpus")
        if self.args.raw:
            corpus = self._corpus_from_recordings(settings)
        else:
            corpus = generate(spec, workers=self.args.workers)
            corpus = corpus.aligned(settings.preprocess.alignment, self._strict_subjects(settings))
        corpus.save(target)
        print(target)

    def cmd_train(self):
        settings = self._settings()
        corpus = self._load_corpus()
        cfg = settings.train
        subjects = corpus.subject_ids
        if self.args.split == "cv":
            plan = split_cv(subjects, cfg.n_folds, self.args.fold, np.random.default_rng(cfg.seed))
        else:
            test_subject = self.args.test_subject
            if test_subject is None:
                raise ConfigError("--test-subject is required with --split loso",
                                  stage="test_subject")
            plan = split_loso(subjects, test_subject, np.random.default_rng([cfg.seed, test_subject]))
        run_id = self.args.run_id or "%s-%s-K%d-seed%d" % (plan.name, cfg.loss_mode,
                                                           cfg.n_models, cfg.seed)
        run_dir = os.path.join(output_dir(self.args.output_dir), run_id)
        manifest = train(cfg, corpus, plan, run_dir, run_id=run_id)
        print("%s: best epoch %d, val %.4f, test %.4f -> %s" % (
            run_id, manifest.best_epoch, manifest.best_val_accuracy,
            manifest.test_accuracy, run_dir))

    def cmd_suite(self):
        settings = self._settings()
        corpus = self._load_corpus()
        cfg = settings.train
        report_id = self.args.report_id or "%s-%s-K%d-seed%d" % (
            self.args.mode, cfg.loss_mode, cfg.n_models, cfg.seed)
        target = os.path.join(output_dir(self.args.output_dir), report_id)
        try:
            report = run_suite(self.args.mode, cfg, corpus, target, report_id=report_id)
        except SuiteError as e:
            sys.stderr.write("partial report written to %s\n" % target)
            raise e
        print("%s: mean test accuracy %.4f over %d runs -> %s" % (
            report_id, report["mean_test_accuracy"], len(report["runs"]), target))

    def cmd_ablate(self):
        settings = self._settings()
        corpus = self._load_corpus()
        target = os.path.join(output_dir(self.args.output_dir), self.args.name)
        table = ablate(settings.train, corpus, self.args.k, self.args.loss_modes,
                       mode=self.args.mode, output_dir=target)
        for row in table.rows():
            print(",".join(str(cell) for cell in row))

    def cmd_gradcheck(self):
        report = gradcheck(n_seeds=self.args.seeds, seed=self.args.seed,
                           cases=self.args.case or None)
        if self.args.json:
            print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        else:
            for line in report.lines():
                print(line)
        return 0 if report.passed else 1

    def cmd_inspect(self):
        path = self.args.path
        if path is None:
            raise ConfigError("inspect needs a manifest file or a folder", stage="path")
        if os.path.isfile(path):
            manifest = RunManifest.load(path)
            print(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
            return 0
        if not os.path.isdir(path):
            raise ConfigError("no such file or folder: %s" % path, stage="path")
        rundb = RunTable(watch=False)
        rundb.add(path, watch=False)
        for run in rundb.get_runs():
            print("%-40s %-8s %-5s K=%d best=%3d val=%.4f test=%.4f params=%d" % (
                run["run_id"], run["method"], run["loss_mode"], run["n_models"],
                run["best_epoch"], run["val_accuracy"], run["test_accuracy"],
                run["n_parameters"]))
        for report in rundb.get_reports():
            print("%-40s %-5s runs=%d mean=%.4f%s" % (
                report["report_id"], report["mode"], report["n_runs"],
                report["mean_test_accuracy"] or 0.0, " (partial)" if report["partial"] else ""))
        rundb.close()

    def cmd_serve(self):
        self.rundb = RunTable(poll=self.args.poll)
        for path in self.args.paths or [output_dir(self.args.output_dir)]:
            if os.path.exists(path):
                self.rundb.add(path)
            else:
                log.warning("%s does not exist, nothing indexed from it", path)
        self.app = create_app(self.rundb)
        self.start()

    # ------------------------------------------------------------------
    # server
    # ------------------------------------------------------------------

    def start(self):
        """Start the app"""
        if self.args.debug:
            self.app.run(port=self.args.port, debug=self.args.debug, host=self.args.interface)
        else:
            root = "http://%s:%s" % (self.args.interface, self.args.port)
            print("tornado web server running on " + root)
            self.shutdown_requested = False
            http_server = HTTPServer(WSGIContainer(self.app))
            http_server.listen(port=self.args.port, address=self.args.interface)

            signal.signal(signal.SIGINT, self.signal_handler)
            signal.signal(signal.SIGTERM, self.signal_handler)
            tornado.ioloop.PeriodicCallback(self.check_shutdown_flag, 500).start()
            tornado.ioloop.IOLoop.current().start()

    def signal_handler(self, *args):
        """Handle SIGINT by setting a flag to request shutdown"""
        self.shutdown_requested = True

    def check_shutdown_flag(self):
        """Shutdown the server if the flag has been set"""
        if self.shutdown_requested:
            tornado.ioloop.IOLoop.current().stop()
            self.rundb.close()
            print("web server stopped.")

    # ------------------------------------------------------------------
    # helpers
    # ------------------------------------------------------------------

    def _settings(self):
        return load_settings(self.args.config, self.args.set)

    def _load_corpus(self):
        if not self.args.corpus:
            raise ConfigError("--corpus is required", stage="corpus")
        return TrialCorpus.load(self.args.corpus)

    def _strict_subjects(self, settings):
        if not settings.preprocess.strict_alignment:
            return None
        if not self.args.holdout:
            raise ConfigError("strict alignment needs --holdout subjects", stage="holdout")
        return self.args.holdout

    def _corpus_from_recordings(self, settings):
        """Continuous recordings through the full preprocessing chain"""
        spec, pre = settings.generator, settings.preprocess
        trials = []
        for recording in generate_recordings(spec, workers=self.args.workers):
            trials.extend(preprocess_recording(recording, pre))
        corpus = TrialCorpus.from_trials(trials, pre.target_fs,
                                         ["class%d" % c for c in range(spec.n_classes)])
        return corpus.aligned(pre.alignment, self._strict_subjects(settings))

    def _parse_args(self, argv):
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument("-A", "--argumentfile", action=ArgfileAction,
                            help="read arguments from the given file")
        common.add_argument("-c", "--config",
                            help="JSON settings file with train/generator/preprocess sections")
        common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override one setting (eg: --set train.epochs=40)")
        common.add_argument("-o", "--output-dir",
                            help="where results go (default: $ECHUB_OUTPUT_DIR or ./runs)")
        common.add_argument("--corpus", help="corpus folder (corpus.bin + corpus.json)")
        common.add_argument("-D", "--debug", action="store_true", default=False,
                            help="turn on debug logging")

        self.parser = parser = argparse.ArgumentParser(
            prog="echub", description="ensemble curriculum experiments on EEG trial corpora")
        parser.add_argument("--version", action="store_true", default=False,
                            help="Display version number and exit")
        sub = parser.add_subparsers(dest="command")

        p = sub.add_parser("generate", parents=[common], help="write a synthetic corpus")
        p.add_argument("--raw", action="store_true", default=False,
                       help="generate continuous recordings and run the preprocessing chain")
        p.add_argument("--workers", type=int, default=1, help="threads across subjects")
        p.add_argument("--holdout", type=_int_list, default=None,
                       help="subjects aligned with training references (strict alignment)")

        p = sub.add_parser("train", parents=[common], help="train one network")
        p.add_argument("--split", choices=("cv", "loso"), default="cv")
        p.add_argument("--fold", type=int, default=0, help="test fold for --split cv")
        p.add_argument("--test-subject", type=int, default=None,
                       help="held-out subject for --split loso")
        p.add_argument("--run-id", default=None)

        p = sub.add_parser("suite", parents=[common], help="every fold or held-out subject")
        p.add_argument("--mode", choices=("cv", "loso"), default="cv")
        p.add_argument("--report-id", default=None)

        p = sub.add_parser("ablate", parents=[common], help="sweep K and loss modes")
        p.add_argument("--mode", choices=("cv", "loso"), default="cv")
        p.add_argument("--k", type=_int_list, default=[2, 3, 5, 7],
                       help="comma separated ensemble sizes (default: 2,3,5,7); sizes "
                            "above the training-subject count are skipped")
        p.add_argument("--loss-modes", type=_str_list, default=["ce", "subj", "total"],
                       help="comma separated loss modes (default: ce,subj,total)")
        p.add_argument("--name", default="ablation")

        p = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks")
        p.add_argument("--seeds", type=int, default=20)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--case", action="append", choices=list(CASES), default=[])
        p.add_argument("--json", action="store_true", default=False)

        p = sub.add_parser("inspect", parents=[common], help="dump a manifest or list runs")
        p.add_argument("path", nargs="?")

        p = sub.add_parser("serve", parents=[common], help="serve the results index over http")
        p.add_argument("-i", "--interface", default="127.0.0.1",
                       help="use the given network interface (default=127.0.0.1)")
        p.add_argument("-p", "--port", default=7070, type=int,
                       help="run on the given PORT (default=7070)")
        p.add_argument("--poll", action="store_true", default=False,
                       help="use polling instead of events to notice new runs (useful in VMs)")
        p.add_argument("paths", nargs="*",
                       help="folders of runs and reports (default: the output folder)")
        return parser.parse_args(argv)


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma separated integers, got %r" % text)


def _str_list(text):
    return [x.strip() for x in text.split(",") if x.strip()]


class ArgfileAction(argparse.Action):
    '''Called when the argument parser encounters --argumentfile'''
    def __call__(self, parser, namespace, values, option_string=None):
        path = os.path.abspath(os.path.expanduser(values))
        if not os.path.exists(path):
            raise ConfigError("Argument file doesn't exist: %s" % values, stage="argumentfile")

        ap = ArgFileParser(["--argumentfile", "-A"])
        args = ap.process(["-A", values])
        parser.parse_args(args, namespace)
