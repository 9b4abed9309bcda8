class Server:
    def __init__(self, host, port):
        self.host = host
        self.port = port

    def start(self):
        return (self.host, self.port)
