from util import parse_config
from server import Server

path = "settings.json"
cfg = parse_conf
