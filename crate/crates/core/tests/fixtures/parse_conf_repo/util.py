import json


def parse_config(path):
    with open(path) as fh:
        return json.load(fh)


def format_size(n):
    return f"{n} bytes"
