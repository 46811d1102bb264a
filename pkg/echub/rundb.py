"""rundb - an SQLite index of finished runs and suite reports

Runs are found by walking folders for manifest.json files (with
their metrics.jsonl next to them); suites by their report.json. A
watchdog observer keeps the index current while runs are still
being written.
"""

import json
import logging
import os
import sqlite3

from watchdog.events import PatternMatchingEventHandler
from watchdog.observers import Observer
from watchdog.observers.polling import PollingObserver


class WatchdogHandler(PatternMatchingEventHandler):
    """Reindex a run or report when its json file appears or changes"""

    def __init__(self, rundb, path):
        PatternMatchingEventHandler.__init__(self, patterns=["*/manifest.json", "*/report.json"])
        self.rundb = rundb
        self.path = path

    def on_created(self, event):
        self.rundb.on_change(event.src_path, event.event_type, root=self.path)

    def on_modified(self, event):
        self.rundb.on_change(event.src_path, event.event_type, root=self.path)


class RunTable(object):
    """A SQLite database of run manifests, epoch metrics and reports"""

    def __init__(self, dbfile=":memory:", poll=False, watch=True):
        self.db = sqlite3.connect(dbfile, check_same_thread=False)
        self.log = logging.getLogger(__name__)
        self._create_db()
        self.observer = None
        if watch:
            self.observer = PollingObserver() if poll else Observer()
            self.observer.start()

    def close(self):
        if self.observer is not None:
            self.observer.stop()
            self.observer.join()
        self.db.close()

    def add(self, path, watch=True, root=None):
        """Add a folder of runs, a manifest.json or a report.json

        Runs and reports are identified by their folder relative to
        'root', with "." between the parts (eg: cv-total-K3.cv-fold0).
        """
        if os.path.isdir(path):
            if not os.path.basename(os.path.normpath(path)).startswith("."):
                self.add_folder(path, watch=watch)
        elif os.path.basename(path) == "manifest.json":
            self.add_manifest(path, root)
        elif os.path.basename(path) == "report.json":
            self.add_report(path, root)
        else:
            self.log.debug("ignoring %s", path)

    def add_folder(self, dirname, watch=True):
        """Index every manifest and report below 'dirname'

        Folders whose names begin with '.' are skipped.
        """
        for root, dirs, files in os.walk(dirname):
            dirs[:] = sorted(d for d in dirs if not d.startswith("."))
            for filename in ("manifest.json", "report.json"):
                if filename in files:
                    try:
                        self.add(os.path.join(root, filename), root=dirname)
                    except (IOError, ValueError, KeyError) as e:
                        self.log.warning("unable to index %s: %s",
                                         os.path.join(root, filename), e)
        if watch and self.observer is not None:
            dirname = os.path.abspath(dirname)
            self.observer.schedule(WatchdogHandler(self, dirname), dirname, recursive=True)

    def on_change(self, path, event_type, root=None):
        """Reload one file after watchdog saw it change"""
        self.log.debug("%s: %s", event_type, path)
        try:
            self.add(path, root=root)
        except (IOError, ValueError, KeyError) as e:
            # the writer may not be done with the file yet
            self.log.debug("unable to reindex %s yet: %s", path, e)

    def add_manifest(self, path, root=None):
        path = os.path.abspath(path)
        with open(path) as f:
            manifest = json.load(f)
        run_id = self._identifier(path, root)
        self._execute("DELETE FROM run_table WHERE run_id == ?", (run_id,))
        self._execute("DELETE FROM epoch_table WHERE run_id == ?", (run_id,))
        config = manifest["config"]
        self._execute("""
            INSERT INTO run_table
                (run_id, name, path, method, loss_mode, n_models, seed, split,
                 best_epoch, val_accuracy, test_accuracy, n_parameters, started, manifest)
            VALUES
                (?,?,?,?,?,?,?,?,?,?,?,?,?,?)
        """, (run_id, manifest["run_id"], os.path.dirname(path), config["method"],
              config["loss_mode"], config["n_models"], config["seed"], manifest["split"]["name"],
              manifest["best_epoch"], manifest["val"]["accuracy"], manifest["test"]["accuracy"],
              manifest["n_parameters"], manifest.get("started"), json.dumps(manifest)))
        for epoch in manifest["epochs"]:
            self._add_epoch(run_id, epoch)
        self.db.commit()
        return run_id

    def add_report(self, path, root=None):
        path = os.path.abspath(path)
        with open(path) as f:
            report = json.load(f)
        report_id = self._identifier(path, root)
        self._execute("DELETE FROM report_table WHERE report_id == ?", (report_id,))
        self._execute("""
            INSERT INTO report_table
                (report_id, name, path, mode, n_runs, mean_test_accuracy, partial, report)
            VALUES
                (?,?,?,?,?,?,?,?)
        """, (report_id, report["report_id"], os.path.dirname(path), report["mode"],
              len(report["runs"]), report["mean_test_accuracy"], int(report["partial"]),
              json.dumps(report)))
        self.db.commit()
        return report_id

    def get_runs(self, pattern="*", loss_mode="*"):
        """Summaries of the runs whose id matches a glob-style pattern"""
        sql = """SELECT run_id, name, method, loss_mode, n_models, seed, split,
                        best_epoch, val_accuracy, test_accuracy, n_parameters, path
                 FROM run_table
                 WHERE run_id like ? ESCAPE '\\'
                 AND loss_mode like ? ESCAPE '\\'
                 ORDER BY run_id
              """
        cursor = self._execute(sql, (self._glob_to_sql(pattern), self._glob_to_sql(loss_mode)))
        return [{"run_id": row[0],
                 "name": row[1],
                 "method": row[2],
                 "loss_mode": row[3],
                 "n_models": row[4],
                 "seed": row[5],
                 "split": row[6],
                 "best_epoch": row[7],
                 "val_accuracy": row[8],
                 "test_accuracy": row[9],
                 "n_parameters": row[10],
                 "path": row[11]} for row in cursor.fetchall()]

    def get_run(self, run_id):
        """The full manifest of one run, or None"""
        row = self._execute("SELECT manifest FROM run_table WHERE run_id == ?",
                            (run_id,)).fetchone()
        return json.loads(row[0]) if row is not None else None

    def get_epochs(self, run_id):
        sql = """SELECT epoch, lr, alpha, loss_total, loss_subj, loss_distill, val_accuracy
                 FROM epoch_table
                 WHERE run_id == ?
                 ORDER BY epoch
              """
        return [{"epoch": row[0], "lr": row[1], "alpha": row[2], "total": row[3],
                 "total_subj": row[4], "total_distill": row[5], "val_accuracy": row[6]}
                for row in self._execute(sql, (run_id,)).fetchall()]

    def get_reports(self, pattern="*"):
        sql = """SELECT report_id, name, mode, n_runs, mean_test_accuracy, partial, path
                 FROM report_table
                 WHERE report_id like ? ESCAPE '\\'
                 ORDER BY report_id
              """
        cursor = self._execute(sql, (self._glob_to_sql(pattern),))
        return [{"report_id": row[0], "name": row[1], "mode": row[2], "n_runs": row[3],
                 "mean_test_accuracy": row[4], "partial": bool(row[5]), "path": row[6]}
                for row in cursor.fetchall()]

    def get_report(self, report_id):
        row = self._execute("SELECT report FROM report_table WHERE report_id == ?",
                            (report_id,)).fetchone()
        return json.loads(row[0]) if row is not None else None

    def _add_epoch(self, run_id, epoch):
        self._execute("""
            INSERT INTO epoch_table
                (run_id, epoch, lr, alpha, loss_total, loss_subj, loss_distill, val_accuracy)
            VALUES
                (?,?,?,?,?,?,?,?)
        """, (run_id, epoch["epoch"], epoch["lr"], epoch["alpha"], epoch["total"],
              epoch["total_subj"], epoch["total_distill"], epoch["val_accuracy"]))

    def _identifier(self, path, root):
        folder = os.path.dirname(os.path.abspath(path))
        if root is not None:
            relative = os.path.relpath(folder, os.path.abspath(root))
            if relative != "." and not relative.startswith(".."):
                return relative.replace(os.sep, ".")
        return os.path.basename(folder)

    def _execute(self, *args):
        cursor = self.db.cursor()
        cursor.execute(*args)
        return cursor

    def _create_db(self):
        if not self._table_exists("run_table"):
            self.db.execute("""
                CREATE TABLE run_table
                (run_id        TEXT PRIMARY KEY COLLATE NOCASE,
                 name          TEXT,
                 path          TEXT,
                 method        TEXT COLLATE NOCASE,
                 loss_mode     TEXT COLLATE NOCASE,
                 n_models      INTEGER,
                 seed          INTEGER,
                 split         TEXT,
                 best_epoch    INTEGER,
                 val_accuracy  REAL,
                 test_accuracy REAL,
                 n_parameters  INTEGER,
                 started       TEXT,
                 manifest      TEXT)
            """)

        if not self._table_exists("epoch_table"):
            self.db.execute("""
                CREATE TABLE epoch_table
                (run_id        TEXT COLLATE NOCASE,
                 epoch         INTEGER,
                 lr            REAL,
                 alpha         REAL,
                 loss_total    REAL,
                 loss_subj     REAL,
                 loss_distill  REAL,
                 val_accuracy  REAL)
            """)
            self.db.execute("""
                CREATE INDEX epoch_index
                ON epoch_table (run_id, epoch)
            """)

        if not self._table_exists("report_table"):
            self.db.execute("""
                CREATE TABLE report_table
                (report_id          TEXT PRIMARY KEY COLLATE NOCASE,
                 name               TEXT,
                 path               TEXT,
                 mode               TEXT,
                 n_runs             INTEGER,
                 mean_test_accuracy REAL,
                 partial            INTEGER,
                 report             TEXT)
            """)

    def _glob_to_sql(self, string):
        """Convert glob-like wildcards to SQL wildcards

        * becomes %
        ? becomes _
        % becomes \\%
        _ becomes \\_
        \\\\ remains \\\\
        \\* becomes *
        \\? becomes ?

        This also adds a leading and trailing %, unless the pattern begins with
        ^ or ends with $
        """
        # chr(1..3) hide the escaped forms from the substitutions that follow
        table = ((r'\\', chr(1)), (r'\*', chr(2)), (r'\?', chr(3)),
                 (r'%', r'\%'),   (r'_', r'\_'),   (r'?', '_'),   (r'*', '%'),
                 (chr(1), r'\\'), (chr(2), '*'),   (chr(3), '?'))

        for (a, b) in table:
            string = string.replace(a, b)

        string = string[1:] if string.startswith("^") else "%" + string
        string = string[:-1] if string.endswith("$") else string + "%"

        return string

    def _table_exists(self, name):
        cursor = self.db.execute("""
            SELECT name FROM sqlite_master
            WHERE type='table' AND name = ?
        """, (name,))
        return len(cursor.fetchall()) > 0
