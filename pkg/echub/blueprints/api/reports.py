'''
This provides the view functions for the /api/reports endpoints
'''

import flask
from flask import current_app


class ApiEndpoint(object):
    def __init__(self, blueprint):
        blueprint.add_url_rule("/reports/", view_func=self.get_reports)
        blueprint.add_url_rule("/reports/<report_id>", view_func=self.get_report)

    def get_reports(self):
        query_pattern = flask.request.args.get('pattern', "*").strip()
        return flask.jsonify(reports=current_app.rundb.get_reports(query_pattern))

    def get_report(self, report_id):
        report = current_app.rundb.get_report(report_id)
        if report is None:
            flask.abort(404)
        return flask.jsonify(report=report)
