"""Shared test utilities (not oracles)."""

def state_dict(net):
    d = {name: arr for name, arr in net.state_items()}
    assert len(d) == len(net.state_items())
    return d


def copy_dmfnet_to_mfnet(dmf_net, mf_net):
    """Copy parameters so the MF network computes the DMF net's d=1 path.

    DMF-only tensors map as bn1 -> conv1.bn and branch_d1 -> conv1.conv;
    the extra branches and omega are dropped (omega must be set to (1,0,0)
    on the DMF net by the caller).
    """
    target = state_dict(mf_net)
    for name, arr in dmf_net.state_items():
        if ".branch_d" in name and ".branch_d1." not in name:
            continue
        if name.endswith(".omega"):
            continue
        name = name.replace(".bn1.", ".conv1.bn.")
        name = name.replace(".branch_d1.weight", ".conv1.conv.weight")
        name = name.replace(".branch_d1.running", ".conv1.conv.running")
        target[name][...] = arr
