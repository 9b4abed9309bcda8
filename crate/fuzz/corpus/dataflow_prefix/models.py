class Account:
    rate = 0.01

    def __init__(self, owner):
        self.owner = owner
        self.balance = 0

    def deposit(self, amount):
        self.balance += amount
        return self.balance

    def interest(self):
        return self.balance * Account.rate


class Ledger:
    def record(self, entry):
        return entry


def open_account(owner):
    return Account(owner)


DEFAULT_OWNER = "bank"
